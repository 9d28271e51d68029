"""Command-line front end.

Every subcommand takes its options as flags or from a ``key=value`` config
file (``--config``); flags win over the file.  Model parameters are set with
``--param key=value`` (or ``param.key=value`` lines in the file).  Each run
writes its CSV artifacts and a ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import inspect
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .approx import FitProblem, find_horizon, fit_least_squares, fit_theoretical, kernel_error
from .ddesolve import dde_explicit, dde_implicit
from .integrate import IntegratorConfig, Trajectory, solve
from .io import (parse_assignments, read_mixture, version_string, write_csv, write_manifest,
                 write_mixture, write_trajectory)
from .kernels import make_kernel
from .lct import LctOde, build_lct
from .models import (MODELS, build_model, check_positive, manufactured_truth, relative_diff,
                     state_error)
from .stability import scan_parameter

log = logging.getLogger("erlangdelay")

FIT_METHODS = ("least-squares", "theoretical")
KERNEL_KEYS = {"gamma1", "gamma2", "mu1", "mu2", "sigma1", "sigma2", "n_terms", "decay"}


class ConfigError(ValueError):
    pass


# -- option tables -------------------------------------------------------------
# name -> (type, default, help); types: float, int, str, bool, "floats", "ints", "strs"

COMMON = {
    "out": (str, "out", "output directory"),
    "workers": (int, 1, "worker threads for scans and Monte Carlo"),
}
FIT = {
    "order": (int, 16, "Erlang mixture order M"),
    "points": (int, 0, "fit grid points N (0: 4(M+1))"),
    "epsilon": (float, 1e-14, "tail mass threshold for the horizon"),
    "fit_tol": (float, 1e-10, "least-squares optimality tolerance"),
    "error_points": (int, 10000, "grid points K_alpha for the kernel error"),
}
ODE = {
    "integrator": (str, "explicit-rk", "explicit-rk or implicit"),
    "scheme": (str, "trbdf2", "implicit scheme: trbdf2 or euler"),
    "atol": (float, 1e-10, "absolute tolerance"),
    "rtol": (float, 1e-10, "relative tolerance"),
}

OPTIONS = {
    "fit-kernel": {
        **COMMON, **FIT,
        "model": (str, None, "fit every kernel of this model id"),
        "kernel": (str, None, "kernel family to fit (with --kernel-param)"),
        "method": (str, "least-squares", "least-squares, theoretical or both"),
        "rate": (float, None, "rate for the theoretical fit (default (M+1)/t_h)"),
    },
    "simulate-lct": {
        **COMMON, **FIT, **ODE,
        "model": (str, "logistic-manufactured", "model id"),
        "fit": (str, "least-squares", "fit method when no mixture files are given"),
        "mixtures": ("strs", None, "mixture files, one per memory channel"),
        "t0": (float, None, "start time (default: model)"),
        "tf": (float, None, "final time (default: model)"),
        "output_dt": (float, None, "sample spacing of the output (default: solver steps)"),
    },
    "simulate-dde": {
        **COMMON,
        "model": (str, "logistic-manufactured", "model id"),
        "method": (str, "explicit", "explicit or implicit"),
        "dt": (float, 0.01, "time step"),
        "horizon": (float, None, "memory horizon, a multiple of dt (default from tail mass 1e-12)"),
        "t0": (float, None, "start time (default: model)"),
        "tf": (float, None, "final time (default: model)"),
    },
    "convergence": {
        **COMMON,
        "orders": ("ints", [4, 8, 16], "mixture orders"),
        "methods": ("strs", list(FIT_METHODS), "fit methods"),
        "points": (int, 100, "fit grid points N"),
        "epsilon": (float, 1e-14, "tail mass threshold"),
        "fit_tol": (float, 1e-10, "least-squares optimality tolerance"),
        "error_points": (int, 10000, "grid points K_alpha for the kernel error"),
        "atol": (float, 1e-12, "ODE absolute tolerance"),
        "rtol": (float, 1e-12, "ODE relative tolerance"),
        "metric_dt": (float, 1e-3, "grid spacing for E_x of the chain runs"),
        "dts": ("floats", [0.04, 0.02, 0.01], "DDE time steps"),
        "horizon": (float, 24.0, "DDE memory horizon"),
    },
    "bifurcate": {
        **COMMON, **FIT,
        "order": (int, 32, "Erlang mixture order M"),
        "parameter": (str, "sigma", "scan parameter (sigma or a kernel parameter such as mu2)"),
        "grid": ("floats", None, "explicit grid values"),
        "start": (float, 1.0, "grid start"),
        "stop": (float, 40.0, "grid stop"),
        "count": (int, 40, "grid size"),
        "dump_spectrum": (bool, False, "write all eigenvalues per grid point"),
        "simulate": ("floats", [], "grid values to simulate with the explicit DDE solver"),
        "dt": (float, 0.0024, "DDE time step for the simulations"),
        "horizon": (float, 24.0, "DDE memory horizon for the simulations"),
    },
    "montecarlo": {
        **COMMON, **FIT,
        "order": (int, 200, "Erlang mixture order M"),
        "points": (int, 1000, "fit grid points N"),
        "epsilon": (float, 1e-13, "tail mass threshold"),
        "samples": (int, 50, "number of kappa samples"),
        "seed": (int, 0, "random seed"),
        "kappa_mean": (float, 3e-4, "mean of kappa"),
        "kappa_sd": (float, 7.5e-5, "standard deviation of kappa"),
        "atol": (float, 1e-8, "ODE absolute tolerance"),
        "rtol": (float, 1e-8, "ODE relative tolerance"),
        "output_dt": (float, 1e-3, "spacing of the statistics grid"),
        "dde_dts": ("floats", [2e-4, 1e-4], "implicit DDE steps for the reference comparison"),
    },
}

DEFAULT_MODEL = {"convergence": "logistic-manufactured", "bifurcate": "logistic-bifurcation",
                 "montecarlo": "fission"}

CSV_HELP = {
    "fit-kernel": "fit_summary.csv: channel,method,order,rate,horizon,objective,kernel_error,converged,iterations\n"
                  "mixture_<channel>_<method>.txt: rate on line 1, then c_0..c_M",
    "simulate-lct": "trajectory.csv: time,<state names>,z1..z<n_z>",
    "simulate-dde": "trajectory.csv: time,<state names>,z1..z<n_z>",
    "convergence": "convergence_fit.csv: order,method,rate,horizon,E_alpha,E_x,error\n"
                   "convergence_dde.csv: solver,dt,E_x,ratio,error",
    "bifurcate": "bifurcation.csv: value,x_bar,max_real,error\n"
                 "spectrum.csv (with dump_spectrum): value,real,imag\n"
                 "simulations.csv: value,max_real,initial_deviation,late_amplitude,error\n"
                 "simulation_<k>.csv: time,x  (k = 1, 2, ... over the simulated values)",
    "montecarlo": "montecarlo_stats.csv: time, then for Cn and rho: _mean,_p2.5,_p97.5,_min,_max\n"
                  "montecarlo_samples.csv: index,kappa,status\n"
                  "relative_diff_<k>.csv: time,<state names>  (E_r of chain vs implicit DDE)\n"
                  "relative_diff_summary.csv: dt,max_E_r,ratio",
}


def _convert(kind, value, key):
    try:
        if kind in ("floats", "ints", "strs"):
            items = value if isinstance(value, list) else [value]
            conv = {"floats": float, "ints": int, "strs": str}[kind]
            if kind == "ints" and any(isinstance(v, float) and not v.is_integer() for v in items):
                raise ValueError("not an integer")
            return [conv(v) for v in items]
        if kind is bool:
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError("not an integer")
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"option {key!r}: cannot interpret {value!r}") from None


@dataclass
class RunConfig:
    """Validated options for one subcommand."""

    command: str
    options: dict
    model: Optional[str] = None
    params: dict = field(default_factory=dict)
    kernel_params: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self) -> dict:
        return {"command": self.command, "model": self.model, "params": self.params,
                "kernel_params": self.kernel_params, **self.options}


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_assignments(fh.read().splitlines(), source=str(path))


def make_config(command: str, given: dict, file_values: Optional[dict] = None,
                params: Optional[dict] = None, kernel_params: Optional[dict] = None) -> RunConfig:
    """Merge defaults, config file and flags; reject unknown keys."""
    table = OPTIONS[command]
    merged = {k: spec[1] for k, spec in table.items()}
    params = dict(params or {})
    kernel_params = dict(kernel_params or {})
    file_params, file_kparams = {}, {}
    for key, value in (file_values or {}).items():
        if key.startswith("param."):
            file_params[key[6:]] = value
        elif key.startswith("kernel."):
            file_kparams[key[7:]] = value
        elif key in table:
            merged[key] = value
        elif key == "model" and command in DEFAULT_MODEL:
            merged["model"] = value
        else:
            raise ConfigError(f"unknown option {key!r} for {command}")
    for key, value in given.items():
        if value is None:
            continue
        if key not in table and not (key == "model" and command in DEFAULT_MODEL):
            raise ConfigError(f"unknown option {key!r} for {command}")
        merged[key] = value
    opts = {}
    for key, value in merged.items():
        if key == "model":
            continue
        kind = table[key][0]
        opts[key] = None if value is None else _convert(kind, value, key)
    model = merged.get("model", DEFAULT_MODEL.get(command))
    if model is not None and model not in MODELS:
        raise ConfigError(f"unknown model id {model!r}; choose from {sorted(MODELS)}")
    cfg = RunConfig(command, opts, model, {**file_params, **params}, {**file_kparams, **kernel_params})
    _validate(cfg)
    return cfg


def _positive(cfg, *names):
    for n in names:
        v = cfg.options.get(n)
        if v is not None and not v > 0:
            raise ConfigError(f"option {n!r} must be positive")


def _validate(cfg: RunConfig):
    c = cfg.command
    o = cfg.options
    if "order" in o and o["order"] < 0:
        raise ConfigError("order must be non-negative")
    if "points" in o and o["points"] < 0:
        raise ConfigError("points must be non-negative")
    _positive(cfg, "epsilon", "atol", "rtol", "dt", "horizon", "metric_dt", "output_dt", "fit_tol")
    if "integrator" in o and o["integrator"] not in ("explicit-rk", "implicit"):
        raise ConfigError("integrator must be explicit-rk or implicit")
    if "scheme" in o and o["scheme"] not in ("trbdf2", "euler"):
        raise ConfigError("scheme must be trbdf2 or euler")
    if c == "fit-kernel":
        if (cfg.model is None) == (o["kernel"] is None):
            raise ConfigError("fit-kernel needs exactly one of --model or --kernel")
        if o["method"] not in FIT_METHODS + ("both",):
            raise ConfigError("method must be least-squares, theoretical or both")
    if c == "simulate-lct" and o["fit"] not in FIT_METHODS:
        raise ConfigError("fit must be least-squares or theoretical")
    if c == "simulate-dde" and o["method"] not in ("explicit", "implicit"):
        raise ConfigError("method must be explicit or implicit")
    if c == "convergence":
        if cfg.model != "logistic-manufactured":
            raise ConfigError("convergence runs on the logistic-manufactured model")
        bad = [m for m in o["methods"] if m not in FIT_METHODS]
        if bad:
            raise ConfigError(f"unknown fit methods {bad}")
        if any(d <= 0 for d in o["dts"]):
            raise ConfigError("dts must be positive")
    if c == "bifurcate":
        if cfg.model != "logistic-bifurcation":
            raise ConfigError("bifurcate runs on the logistic-bifurcation model")
        if o["grid"] is None and o["count"] < 1:
            raise ConfigError("count must be at least 1")
    if c == "montecarlo":
        if cfg.model != "fission":
            raise ConfigError("montecarlo runs on the fission model")
        if o["samples"] < 1:
            raise ConfigError("samples must be at least 1")
        if o["kappa_sd"] < 0:
            raise ConfigError("kappa_sd must be non-negative")
    if "workers" in o and o["workers"] < 1:
        raise ConfigError("workers must be at least 1")


# -- run bookkeeping -----------------------------------------------------------

class Run:
    """Collects timings, outputs and failures; writes the manifest at the end."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = time.time()
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        self.failures: list[dict] = []
        self.extra: dict[str, Any] = {}

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def fail(self, stage, exc):
        log.warning("%s failed: %s", stage, exc)
        self.failures.append({"stage": stage, "error": f"{type(exc).__name__}: {exc}"})

    def finish(self) -> Path:
        manifest = {
            "config": self.cfg.echo(),
            "version": version_string(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started)),
            "wall_time": time.time() - self.started,
            "timings": self.timings,
            "outputs": self.outputs,
            "failures": self.failures,
            **self.extra,
        }
        return write_manifest(self.out / "manifest.json", manifest)


# -- shared stages -------------------------------------------------------------

def fit_kernel(kernel, order, method="least-squares", points=0, epsilon=1e-14, fit_tol=1e-10,
               error_points=10000, rate=None):
    """Horizon search followed by a least-squares or theoretical fit."""
    horizon = find_horizon(kernel, epsilon).t_h
    if method == "least-squares":
        return fit_least_squares(FitProblem(kernel, order, horizon, samples=points), tol=fit_tol,
                                 error_points=error_points)
    if method == "theoretical":
        return fit_theoretical(kernel, order, horizon, rate=rate, samples=points,
                               error_points=error_points)
    raise ValueError(f"unknown fit method {method!r}")


def _fit_all(cfg, kernels, method):
    o = cfg.options
    return [fit_kernel(k, o["order"], method, o["points"], o["epsilon"], o["fit_tol"],
                       o["error_points"], o.get("rate")) for k in kernels]


def _x_part(traj: Trajectory, n_x: int, lct=None) -> Trajectory:
    """Trajectory of the model states only, memory ``z = C Z`` attached."""
    mem = None
    if lct is not None:
        mem = np.array([lct.memory(y[n_x:]) for y in traj.states])
    return Trajectory(traj.times, traj.states[:, :n_x],
                      None if traj.derivs is None else traj.derivs[:, :n_x], memory=mem,
                      n_steps=traj.n_steps, n_rejected=traj.n_rejected, n_fev=traj.n_fev,
                      n_jev=traj.n_jev, n_lu=traj.n_lu, names=list(traj.names))


def simulate_lct(model, mixtures, config: IntegratorConfig, t0=None, tf=None, t_eval=None) -> Trajectory:
    """Integrate the chain system; returns model states with ``z`` as memory."""
    lct = build_lct(mixtures)
    ode = LctOde(model, lct)
    t0 = model.t_span[0] if t0 is None else t0
    tf = model.t_span[1] if tf is None else tf
    traj = solve(ode, ode.initial_state(), t0, tf, config, jacobian=ode.jacobian)
    out = _x_part(traj, model.n_x, lct)
    if t_eval is not None:
        out = out.resample(t_eval)
    out.names = model.names()
    return out


def _integrator(o) -> IntegratorConfig:
    method = o.get("integrator", "explicit-rk")
    return IntegratorConfig(atol=o["atol"], rtol=o["rtol"], method=method,
                            scheme=o.get("scheme", "trbdf2"))


def _grid(t0, tf, dt):
    n = int(round((tf - t0) / dt))
    if n < 1 or abs(n * dt - (tf - t0)) > 1e-9 * max(dt, tf - t0):
        raise ConfigError(f"output spacing {dt} does not divide [{t0}, {tf}]")
    return t0 + dt * np.arange(n + 1)


def _mem_names(model):
    return [f"z{i + 1}" for i in range(model.n_z)]


# -- subcommands ---------------------------------------------------------------

def cmd_fit(cfg: RunConfig, run: Run):
    o = cfg.options
    if cfg.model is not None:
        kernels = list(build_model(cfg.model, **cfg.params).kernels)
    else:
        kernels = [make_kernel(o["kernel"], **cfg.kernel_params)]
    methods = FIT_METHODS if o["method"] == "both" else (o["method"],)
    rows = []
    for ch, kernel in enumerate(kernels, start=1):
        for method in methods:
            with run.stage(f"fit-{method}"):
                res = fit_kernel(kernel, o["order"], method, o["points"], o["epsilon"], o["fit_tol"],
                                 o["error_points"], o["rate"])
            write_mixture(run.path(f"mixture_{ch}_{method}.txt"), res.mixture)
            rows.append([ch, method, res.mixture.order, res.mixture.rate, res.horizon, res.objective,
                         res.kernel_error, res.converged, res.iterations])
    write_csv(run.path("fit_summary.csv"), ["channel", "method", "order", "rate", "horizon",
                                            "objective", "kernel_error", "converged", "iterations"], rows)


def cmd_simulate_lct(cfg: RunConfig, run: Run):
    o = cfg.options
    model = build_model(cfg.model, **cfg.params)
    if o["mixtures"]:
        if len(o["mixtures"]) != model.n_z:
            raise ConfigError(f"model {cfg.model} needs {model.n_z} mixture files")
        mixtures = [read_mixture(p) for p in o["mixtures"]]
    else:
        with run.stage("fit"):
            mixtures = [r.mixture for r in _fit_all(cfg, model.kernels, o["fit"])]
    t0 = model.t_span[0] if o["t0"] is None else o["t0"]
    tf = model.t_span[1] if o["tf"] is None else o["tf"]
    t_eval = None if o["output_dt"] is None else _grid(t0, tf, o["output_dt"])
    with run.stage("integrate"):
        traj = simulate_lct(model, mixtures, _integrator(o), t0, tf, t_eval)
    run.extra["steps"] = {"accepted": traj.n_steps, "rejected": traj.n_rejected}
    write_trajectory(run.path("trajectory.csv"), traj, model.names(), _mem_names(model))


def cmd_simulate_dde(cfg: RunConfig, run: Run):
    o = cfg.options
    model = build_model(cfg.model, **cfg.params)
    solver = dde_explicit if o["method"] == "explicit" else dde_implicit
    with run.stage("integrate"):
        traj = solver(model, dt=o["dt"], horizon=o["horizon"], t0=o["t0"], tf=o["tf"])
    write_trajectory(run.path("trajectory.csv"), traj, model.names(), _mem_names(model))


def cmd_convergence(cfg: RunConfig, run: Run):
    o = cfg.options
    model = build_model(cfg.model, **cfg.params)
    dilation = model.params["dilation"]
    t0, tf = model.t_span

    def truth(t):
        return manufactured_truth(dilation, t)[0]

    kernel = model.kernels[0]
    rows = []
    for order in o["orders"]:
        for method in o["methods"]:
            row = [order, method, math.nan, math.nan, math.nan, math.nan, ""]
            try:
                with run.stage(f"fit-{method}"):
                    res = fit_kernel(kernel, order, method, o["points"], o["epsilon"], o["fit_tol"],
                                     o["error_points"])
                row[2:5] = [res.mixture.rate, res.horizon, res.kernel_error]
                with run.stage("lct"):
                    traj = simulate_lct(model, [res.mixture], IntegratorConfig(atol=o["atol"], rtol=o["rtol"]))
                check_positive(traj)
                row[5] = state_error(traj, truth, o["metric_dt"], t0, tf)
            except Exception as exc:
                run.fail(f"fit/lct M={order} {method}", exc)
                row[6] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    write_csv(run.path("convergence_fit.csv"),
              ["order", "method", "rate", "horizon", "E_alpha", "E_x", "error"], rows)

    drows = []
    for name, solver in (("explicit", dde_explicit), ("implicit", dde_implicit)):
        prev = None
        for dt in o["dts"]:
            row = [name, dt, math.nan, math.nan, ""]
            try:
                with run.stage(f"dde-{name}"):
                    traj = solver(model, dt=dt, horizon=o["horizon"])
                check_positive(traj)
                e = state_error(traj, truth, dt, t0, tf, interpolate=False)
                row[2] = e
                if prev is not None:
                    row[3] = prev / e
                prev = e
            except Exception as exc:
                run.fail(f"dde {name} dt={dt}", exc)
                row[4] = f"{type(exc).__name__}: {exc}"
                prev = None
            drows.append(row)
    write_csv(run.path("convergence_dde.csv"), ["solver", "dt", "E_x", "ratio", "error"], drows)


def scan_grid(o) -> list:
    if o["grid"]:
        return list(o["grid"])
    return list(np.linspace(o["start"], o["stop"], o["count"]))


def cmd_bifurcate(cfg: RunConfig, run: Run):
    o = cfg.options
    par = o["parameter"]
    base = dict(cfg.params)
    if par not in inspect.signature(MODELS["logistic-bifurcation"]).parameters:
        raise ConfigError(f"unknown scan parameter {par!r}")
    grid = scan_grid(o)

    def factory(v):
        return build_model("logistic-bifurcation", **{**base, par: v})

    kappa = factory(grid[0]).params["kappa"]
    cache = {}

    def lct_builder(v):
        key = v if par in KERNEL_KEYS else None
        if key not in cache:
            kernel = factory(v).kernels[0]
            res = fit_kernel(kernel, o["order"], "least-squares", o["points"], o["epsilon"],
                             o["fit_tol"], o["error_points"])
            cache[key] = build_lct([res.mixture])
        return cache[key]

    with run.stage("scan"):
        if par not in KERNEL_KEYS:
            lct_builder(grid[0])
        rows = scan_parameter(factory, lct_builder, grid, [kappa], dump_spectrum=o["dump_spectrum"],
                              workers=o["workers"])
    out_rows = []
    for r in rows:
        xb = math.nan if r["x_bar"] is None else float(r["x_bar"][0])
        out_rows.append([r["value"], xb, r["max_real"], r["error"]])
        if r["error"]:
            run.failures.append({"stage": f"scan {par}={r['value']}", "error": r["error"]})
    write_csv(run.path("bifurcation.csv"), ["value", "x_bar", "max_real", "error"], out_rows)
    if o["dump_spectrum"]:
        spec_rows = [[r["value"], lam.real, lam.imag] for r in rows if r["spectrum"] is not None
                     for lam in r["spectrum"]]
        write_csv(run.path("spectrum.csv"), ["value", "real", "imag"], spec_rows)

    sims = []
    max_real = {r["value"]: r["max_real"] for r in rows}
    for k, v in enumerate(o["simulate"], start=1):
        row = [v, max_real.get(v, math.nan), math.nan, math.nan, ""]
        try:
            model = factory(v)
            with run.stage("simulate"):
                traj = dde_explicit(model, dt=o["dt"], horizon=o["horizon"])
            x = traj.states[:, 0]
            row[2] = abs(x[0] - kappa)
            row[3] = float(np.max(np.abs(x[3 * len(x) // 4:] - kappa)))
            write_trajectory(run.path(f"simulation_{k}.csv"), traj, model.names())
        except Exception as exc:
            run.fail(f"simulate {par}={v}", exc)
            row[4] = f"{type(exc).__name__}: {exc}"
        sims.append(row)
    if sims:
        write_csv(run.path("simulations.csv"),
                  ["value", "max_real", "initial_deviation", "late_amplitude", "error"], sims)


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normal draws from pairs of uniforms."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # in (0, 1]
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
    return z[:n]


def pointwise_stats(values: np.ndarray) -> np.ndarray:
    """Columns mean, 2.5 and 97.5 percentiles (linear interpolation), min, max."""
    return np.column_stack([values.mean(axis=0),
                            np.percentile(values, 2.5, axis=0, method="linear"),
                            np.percentile(values, 97.5, axis=0, method="linear"),
                            values.min(axis=0), values.max(axis=0)])


def cmd_montecarlo(cfg: RunConfig, run: Run):
    o = cfg.options
    base = dict(cfg.params)
    base.pop("kappa", None)
    model0 = build_model("fission", **base, kappa=o["kappa_mean"])
    with run.stage("fit"):
        fits = _fit_all(cfg, model0.kernels, "least-squares")
    mixtures = [r.mixture for r in fits]
    for ch, r in enumerate(fits, start=1):
        write_mixture(run.path(f"mixture_{ch}.txt"), r.mixture)
    run.extra["kernel_errors"] = [r.kernel_error for r in fits]
    t0, tf = model0.t_span
    grid = _grid(t0, tf, o["output_dt"])
    rng = np.random.default_rng(o["seed"])
    kappas = o["kappa_mean"] + o["kappa_sd"] * box_muller(rng, o["samples"])
    integ = IntegratorConfig(atol=o["atol"], rtol=o["rtol"], method="implicit")
    names = model0.names()
    i_cn, i_rho = names.index("Cn"), names.index("rho")

    def one(idx):
        try:
            model = build_model("fission", **base, kappa=float(kappas[idx]))
            traj = simulate_lct(model, mixtures, integ, t_eval=grid)
            return idx, traj.states[:, [i_cn, i_rho]], ""
        except Exception as exc:
            return idx, None, f"{type(exc).__name__}: {exc}"

    with run.stage("samples"):
        if o["workers"] > 1:
            with ThreadPoolExecutor(max_workers=o["workers"]) as pool:
                results = list(pool.map(one, range(o["samples"])))
        else:
            results = [one(i) for i in range(o["samples"])]
    results.sort(key=lambda r: r[0])
    ok = [r for r in results if r[1] is not None]
    failed = [r for r in results if r[1] is None]
    run.extra["samples"] = {"requested": o["samples"], "succeeded": len(ok), "failed": len(failed),
                            "seed": o["seed"]}
    for idx, _, err in failed:
        run.failures.append({"stage": f"sample {idx}", "error": err})
    write_csv(run.path("montecarlo_samples.csv"), ["index", "kappa", "status"],
              [[i, kappas[i], err or "ok"] for i, _, err in results])
    if ok:
        stack = np.stack([r[1] for r in ok])  # (samples, times, 2)
        cols = [grid[:, None]]
        header = ["time"]
        for j, name in enumerate(("Cn", "rho")):
            cols.append(pointwise_stats(stack[:, :, j]))
            header += [f"{name}_mean", f"{name}_p2.5", f"{name}_p97.5", f"{name}_min", f"{name}_max"]
        write_csv(run.path("montecarlo_stats.csv"), header, np.hstack(cols))

    # reference comparison at the mean kappa
    summary = []
    try:
        with run.stage("reference-lct"):
            ref = simulate_lct(model0, mixtures, integ)
        prev = None
        for k, dt in enumerate(o["dde_dts"], start=1):
            with run.stage("reference-dde"):
                dde = dde_implicit(model0, dt=dt)
            er = relative_diff(ref, dde)
            write_csv(run.path(f"relative_diff_{k}.csv"), ["time", *names],
                      np.hstack([dde.times[:, None], er]))
            mx = float(er.max())
            summary.append([dt, mx, math.nan if prev is None else prev / mx])
            prev = mx
    except Exception as exc:
        run.fail("reference comparison", exc)
    write_csv(run.path("relative_diff_summary.csv"), ["dt", "max_E_r", "ratio"], summary)


COMMANDS: dict[str, Callable] = {
    "fit-kernel": cmd_fit,
    "simulate-lct": cmd_simulate_lct,
    "simulate-dde": cmd_simulate_dde,
    "convergence": cmd_convergence,
    "bifurcate": cmd_bifurcate,
    "montecarlo": cmd_montecarlo,
}

DESCRIPTIONS = {
    "fit-kernel": "Fit Erlang mixtures to a kernel family or to every kernel of a model.",
    "simulate-lct": "Simulate a model through its linear-chain ODE system.",
    "simulate-dde": "Simulate a model with the fixed-step Euler DDE solvers.",
    "convergence": "Manufactured-solution study: E_alpha and E_x per order and fit method, "
                   "and E_x per DDE time step.",
    "bifurcate": "Steady state and largest eigenvalue real part over a parameter grid.",
    "montecarlo": "Monte Carlo over the reactivity feedback constant of the fission model.",
}


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erlangdelay",
                                     description="Erlang mixture approximation of distributed-delay DDEs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, table in OPTIONS.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name],
                           epilog="CSV outputs (header row, columns in this order):\n" + CSV_HELP[name],
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                       help="model parameter override")
        if name in DEFAULT_MODEL:
            p.add_argument("--model", default=None, help=f"model id (default {DEFAULT_MODEL[name]})")
        if name == "fit-kernel":
            p.add_argument("--kernel-param", action="append", default=[], metavar="KEY=VALUE",
                           help="kernel family parameter")
        for key, (kind, default, text) in table.items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                               help=text)
            elif kind in ("floats", "ints", "strs"):
                p.add_argument(flag, dest=key, nargs="+", default=None, help=f"{text} (default {default})")
            else:
                p.add_argument(flag, dest=key, default=None, help=f"{text} (default {default})")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    table = OPTIONS[args.command]
    given = {k: getattr(args, k) for k in table}
    if args.command in DEFAULT_MODEL:
        given["model"] = args.model
    file_values = load_config_file(args.config) if args.config else None
    params = parse_assignments(args.param)
    kparams = parse_assignments(getattr(args, "kernel_param", []) or [])
    return make_config(args.command, given, file_values, params, kparams)


def run_config(cfg: RunConfig) -> Path:
    run = Run(cfg)
    try:
        COMMANDS[cfg.command](cfg, run)
    except Exception as exc:
        run.fail("fatal", exc)
        raise
    finally:
        run.finish()
    return run.out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError, ValueError) as exc:
        parser.error(str(exc))
    try:
        out = run_config(cfg)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
