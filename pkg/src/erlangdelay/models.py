"""Benchmark systems and error metrics.

* ``logistic-manufactured``: logistic growth with a Gaussian half-line delay
  kernel and a forcing term chosen so that ``x*(t) = 1 + exp(-(t/gamma)^2)``
  is the exact solution.
* ``logistic-bifurcation``: unforced logistic growth with a two-term folded
  normal kernel.
* ``fission``: point reactor kinetics of a circulating-fuel reactor with six
  precursor groups whose inlet concentrations are delayed by recirculation.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .integrate import Trajectory
from .kernels import make_kernel
from .lct import ModelSpec

__all__ = [
    "GridMismatchError",
    "PositivityError",
    "manufactured_truth",
    "manufactured_logistic",
    "logistic_model",
    "fission_model",
    "FISSION_DEFAULTS",
    "LOGISTIC_DEFAULTS",
    "MODELS",
    "build_model",
    "metric_grid",
    "state_error",
    "relative_diff",
    "check_positive",
]


class GridMismatchError(ValueError):
    pass


class PositivityError(ArithmeticError):
    pass


# -- logistic ----------------------------------------------------------------

LOGISTIC_DEFAULTS = dict(
    sigma=4.0, kappa=1.0,
    gamma1=0.5, gamma2=0.5, mu1=0.35, mu2=0.45, sigma1=0.06, sigma2=0.12,
    t0=0.0, tf=24.0, x0=0.9,
)


def manufactured_truth(gamma: float, t, sigma: float = 4.0, kappa: float = 1.0):
    """Exact state, memory and forcing for the manufactured logistic problem.

    The memory is the convolution of ``x*`` with ``2/sqrt(pi) exp(-s^2)``.
    Returns ``(x*, z*, Q)`` evaluated at ``t``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    t = np.asarray(t, dtype=float)
    g2 = gamma * gamma
    x = 1.0 + np.exp(-t * t / g2)
    dx = -2.0 * t / g2 * np.exp(-t * t / g2)
    root = math.sqrt(g2 + 1.0)
    z = 1.0 + gamma / root * np.exp(-t * t / (g2 + 1.0)) * (1.0 + erf(t / (gamma * root)))
    q = dx - sigma * x * (1.0 - z / kappa)
    return x, z, q


def _logistic_spec(name, sigma, kappa, kernel, history, t_span, forcing=None, params=None):
    if sigma <= 0 or kappa <= 0:
        raise ValueError("sigma and kappa must be positive")

    def f(t, x, z):
        out = sigma * x * (1.0 - z / kappa)
        if forcing is not None:
            out = out + forcing(t)
        return out

    def jac_x(t, x, z):
        return np.array([[sigma * (1.0 - z[0] / kappa)]])

    def jac_z(t, x, z):
        return np.array([[-sigma * x[0] / kappa]])

    return ModelSpec(
        name=name, n_x=1, n_z=1, f=f,
        h=lambda x: np.asarray(x, dtype=float).copy(),
        jac_x=jac_x, jac_z=jac_z,
        jac_h=lambda x: np.eye(1),
        history=history, kernels=(kernel,), t_span=t_span,
        params=dict(params or {}), state_names=("x",),
    )


def manufactured_logistic(sigma: float = 4.0, kappa: float = 1.0, dilation: float = 10.0,
                          t0: float = 0.0, tf: float = 24.0) -> ModelSpec:
    """Logistic model whose exact solution is ``1 + exp(-(t/dilation)^2)``."""
    kernel = make_kernel("gaussian-halfline")

    def forcing(t):
        return manufactured_truth(dilation, t, sigma, kappa)[2]

    def history(t):
        return np.atleast_1d(manufactured_truth(dilation, t)[0])

    return _logistic_spec("logistic-manufactured", sigma, kappa, kernel, history, (t0, tf),
                          forcing=forcing,
                          params=dict(sigma=sigma, kappa=kappa, dilation=dilation, t0=t0, tf=tf))


def logistic_model(sigma: float = 4.0, kappa: float = 1.0, gamma1: float = 0.5, gamma2: float = 0.5,
                   mu1: float = 0.35, mu2: float = 0.45, sigma1: float = 0.06, sigma2: float = 0.12,
                   t0: float = 0.0, tf: float = 24.0, x0: float = 0.9) -> ModelSpec:
    """Unforced logistic model with a two-term folded normal kernel."""
    kernel = make_kernel("folded-normal-sum", weights=(gamma1, gamma2), locations=(mu1, mu2),
                         scales=(sigma1, sigma2))
    params = dict(sigma=sigma, kappa=kappa, gamma1=gamma1, gamma2=gamma2, mu1=mu1, mu2=mu2,
                  sigma1=sigma1, sigma2=sigma2, t0=t0, tf=tf, x0=x0)
    return _logistic_spec("logistic-bifurcation", sigma, kappa, kernel, np.array([x0]), (t0, tf),
                          params=params)


# -- fission -----------------------------------------------------------------

FISSION_DEFAULTS = dict(
    decay=(0.0124, 0.0305, 0.1110, 0.3010, 1.1300, 3.0000),
    fractions=(0.00021, 0.00141, 0.00127, 0.00255, 0.00074, 0.00027),
    generation_time=5e-5,
    kappa=3e-4,
    heat_ratio=0.05,
    dilution=2.0,
    mu1=2.0,
    sigma1=0.1,
    n_terms=7,
    t0=0.0,
    tf=2.0,
)


def fission_model(decay: Sequence[float] = FISSION_DEFAULTS["decay"],
                  fractions: Sequence[float] = FISSION_DEFAULTS["fractions"],
                  generation_time: float = 5e-5, kappa: float = 3e-4, heat_ratio: float = 0.05,
                  dilution: float = 2.0, mu1: float = 2.0, sigma1: float = 0.1, n_terms: int = 7,
                  t0: float = 0.0, tf: float = 2.0, initial=None) -> ModelSpec:
    """Point kinetics with recirculating precursors.

    State ``(C_1..C_6, C_n, rho)``, memory ``C_in`` (one channel per group)
    with input ``h(x) = (C_1..C_6)``.  Production rates are ``R = S^T r`` with
    reactions ``r = (lambda_i C_i, C_n / Lambda)``.
    """
    lam = np.asarray(decay, dtype=float)
    b = np.asarray(fractions, dtype=float)
    if lam.shape != b.shape or lam.ndim != 1:
        raise ValueError("decay constants and fractions must be vectors of equal length")
    ng = lam.size
    n = ng + 1
    btot = float(b.sum())
    Lam, D, kap, H = generation_time, dilution, kappa, heat_ratio

    def stoich(rho):
        S = np.zeros((n, n))
        S[np.arange(ng), np.arange(ng)] = -1.0
        S[:ng, ng] = 1.0
        S[ng, :ng] = b
        S[ng, ng] = rho - btot
        return S

    def rates(x):
        return np.concatenate([lam * x[:ng], [x[ng] / Lam]])

    def f(t, x, z):
        x = np.asarray(x, dtype=float)
        R = stoich(x[n]).T @ rates(x)
        out = np.empty(n + 1)
        out[:ng] = (z - x[:ng]) * D + R[:ng]
        out[ng] = R[ng]
        out[n] = -kap * H * x[ng]
        return out

    def jac_x(t, x, z):
        x = np.asarray(x, dtype=float)
        J = np.zeros((n + 1, n + 1))
        J[np.arange(ng), np.arange(ng)] = -D - lam
        J[:ng, ng] = b / Lam
        J[ng, :ng] = lam
        J[ng, ng] = (x[n] - btot) / Lam
        J[ng, n] = x[ng] / Lam
        J[n, ng] = -kap * H
        return J

    def jac_z(t, x, z):
        G = np.zeros((n + 1, ng))
        G[np.arange(ng), np.arange(ng)] = D
        return G

    Hmat = np.zeros((ng, n + 1))
    Hmat[np.arange(ng), np.arange(ng)] = 1.0

    kernels = tuple(make_kernel("precursor", decay=float(l), mu1=mu1, sigma1=sigma1, n_terms=n_terms)
                    for l in lam)
    if initial is None:
        initial = np.concatenate([np.ones(n), [1.1 * btot]])
    names = tuple([f"C{i + 1}" for i in range(ng)] + ["Cn", "rho"])
    params = dict(decay=list(lam), fractions=list(b), generation_time=Lam, kappa=kap,
                  heat_ratio=H, dilution=D, mu1=mu1, sigma1=sigma1, n_terms=n_terms, t0=t0, tf=tf)
    return ModelSpec(
        name="fission", n_x=n + 1, n_z=ng, f=f,
        h=lambda x: np.asarray(x, dtype=float)[:ng].copy(),
        jac_x=jac_x, jac_z=jac_z, jac_h=lambda x: Hmat,
        history=np.asarray(initial, dtype=float), kernels=kernels, t_span=(t0, tf),
        params=params, state_names=names,
    )


MODELS: dict[str, Callable[..., ModelSpec]] = {
    "logistic-manufactured": manufactured_logistic,
    "logistic-bifurcation": logistic_model,
    "fission": fission_model,
}


def build_model(name: str, **overrides) -> ModelSpec:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model id {name!r}; choose from {sorted(MODELS)}") from None
    return factory(**overrides)


# -- metrics -----------------------------------------------------------------

def metric_grid(t0: float, tf: float, dt: float) -> np.ndarray:
    """Points ``t_1 .. t_K`` with ``t_n = t0 + n dt`` and ``K = (tf - t0) / dt``."""
    k = int(round((tf - t0) / dt))
    if k <= 0 or abs(k * dt - (tf - t0)) > 1e-9 * max(dt, abs(tf - t0)):
        raise ValueError("dt must divide the metric interval")
    return t0 + dt * np.arange(1, k + 1)


def _values_at(traj: Trajectory, times: np.ndarray, interpolate: bool) -> np.ndarray:
    if interpolate:
        return traj.interpolate(times)
    idx = np.searchsorted(traj.times, times)
    idx = np.clip(idx, 0, len(traj.times) - 1)
    close = np.abs(traj.times[idx] - times) <= 1e-12 * np.maximum(1.0, np.abs(times))
    if not np.all(close):
        raise GridMismatchError("trajectory times do not contain the metric grid; enable interpolation")
    return traj.states[idx]


def state_error(traj: Trajectory, truth, dt: float, t0: Optional[float] = None,
                tf: Optional[float] = None, interpolate: bool = True, component: int = 0) -> float:
    """``E_x = sum_n (x_hat(t_{n+1}) - x*(t_{n+1}))^2 dt`` over the metric grid.

    ``truth`` is a callable ``t -> x*(t)`` (vectorized) or an array of values
    on the grid.
    """
    t0 = traj.times[0] if t0 is None else t0
    tf = traj.times[-1] if tf is None else tf
    grid = metric_grid(t0, tf, dt)
    xh = _values_at(traj, grid, interpolate)[:, component]
    xs = np.asarray(truth(grid) if callable(truth) else truth, dtype=float).reshape(-1)
    if xs.size != grid.size:
        raise GridMismatchError(f"truth has {xs.size} values for {grid.size} grid points")
    return float(np.sum((xh - xs) ** 2) * dt)


def relative_diff(traj: Trajectory, reference: Trajectory, times=None, interpolate: bool = True) -> np.ndarray:
    """``|x_hat_i - x_i| / (1 + |x_i|)`` per time (rows) and state (columns).

    ``reference`` provides ``x``; its time grid is used unless ``times`` is given.
    """
    if times is None:
        times, x = reference.times, reference.states
    else:
        times = np.asarray(times, dtype=float)
        x = _values_at(reference, times, interpolate)
    xh = _values_at(traj, times, interpolate)
    if xh.shape != x.shape:
        raise GridMismatchError("trajectories have different state dimensions")
    return np.abs(xh - x) / (1.0 + np.abs(x))


def check_positive(traj: Trajectory, component: int = 0):
    """Abort when a state that must stay positive does not."""
    vals = traj.states[:, component]
    bad = np.flatnonzero(~(vals > 0))
    if bad.size:
        k = bad[0]
        raise PositivityError(f"state {component} reached {vals[k]:.6g} at t={traj.times[k]:.6g}; "
                              "the solution must stay bounded away from zero")
