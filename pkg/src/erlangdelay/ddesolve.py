"""Fixed-step Euler integrators applied directly to the distributed-delay DDE.

The memory state is a rectangle-rule convolution truncated at the memory
horizon ``dt_h = N_h * dt``:

* explicit: ``z_{n+1} = sum_{j=1}^{N_h} alpha(j dt) r_{n-j+1} dt`` (left rule)
* implicit: ``z_{n+1} = sum_{j=0}^{N_h-1} alpha(j dt) r_{n-j+1} dt`` (right rule),
  so ``z_{n+1}`` depends on ``r_{n+1} = h(x_{n+1})`` through ``alpha(0)``.

Past values ``r_k`` with ``t_k <= t0`` come from the model history.  With a
constant history their contribution to ``z_n`` is ``r0`` times a tail sum of
weights, which is precomputed; the remaining terms are a direct dot product
over the computed values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .approx import find_horizon
from .integrate import Trajectory
from .kernels import KernelSpec
from .lct import ModelSpec

__all__ = [
    "DivergenceError",
    "DdeGrid",
    "default_horizon",
    "dde_explicit",
    "dde_implicit",
    "direct_memory",
]


class DivergenceError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def _as_multiple(value: float, dt: float, what: str) -> int:
    n = int(round(value / dt))
    if n <= 0 or abs(n * dt - value) > 1e-9 * max(dt, abs(value)):
        raise ValueError(f"{what}={value!r} is not a positive integer multiple of dt={dt!r}")
    return n


def default_horizon(kernels: Sequence[KernelSpec], dt: float, epsilon: float = 1e-12) -> float:
    """Largest tail-mass horizon over the channels, rounded up to a multiple of ``dt``."""
    t_h = max(find_horizon(k, epsilon).t_h for k in kernels)
    return math.ceil(t_h / dt - 1e-9) * dt


@dataclass
class DdeGrid:
    """Step, memory horizon and kernel weights ``alpha_i(j dt) dt`` for ``j = 0..N_h``."""

    dt: float
    horizon: float
    n_h: int
    weights: np.ndarray  # shape (n_z, N_h + 1)

    @classmethod
    def build(cls, kernels: Sequence[KernelSpec], dt: float, horizon: Optional[float] = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if horizon is None:
            horizon = default_horizon(kernels, dt)
        n_h = _as_multiple(horizon, dt, "memory horizon")
        s = np.arange(n_h + 1) * dt
        w = np.array([np.asarray(k.density(s), dtype=float) * dt for k in kernels])
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights are not finite")
        return cls(dt, n_h * dt, n_h, w)

    def window(self, implicit: bool) -> np.ndarray:
        """Weights in the order they multiply ``r_n, r_{n-1}, ...``."""
        return self.weights[:, :-1] if implicit else self.weights[:, 1:]


def direct_memory(weights_window, r_hist: np.ndarray) -> np.ndarray:
    """Reference ``z = sum_j w_j r_{latest-j}`` with ``r_hist`` ordered oldest first."""
    n = weights_window.shape[1]
    return np.einsum("ij,ji->i", weights_window, r_hist[::-1][:n])


class _Memory:
    """Past memory inputs and the rectangle-rule convolution over them."""

    def __init__(self, model: ModelSpec, grid: DdeGrid, t0: float, n_steps: int, implicit: bool):
        self.w = grid.window(implicit)  # (n_z, N_h); column j multiplies r_{k-j}
        self.n_h = grid.n_h
        self.n_z = model.n_z
        self.constant = model.constant_history
        # values r_k for k = -N_h .. n_steps, stored at index k + N_h
        self.offset = self.n_h
        self.r = np.zeros((self.n_h + 1 + n_steps, self.n_z))
        if self.constant:
            self.r0 = np.asarray(model.h(model.x0), dtype=float)
            # tail[i, k] = sum_{j >= k} w[i, j]: mass of the history part
            self.tail = np.concatenate([np.cumsum(self.w[:, ::-1], axis=1)[:, ::-1],
                                        np.zeros((self.n_z, 1))], axis=1)
            self.r[: self.offset + 1] = self.r0
        else:
            ks = np.arange(-self.offset, 1)
            for k in ks:
                self.r[k + self.offset] = model.h(model.history_at(t0 + k * grid.dt))
        # reversed weights so that a forward slice of r lines up with them
        self.w_rev = np.ascontiguousarray(self.w[:, ::-1])

    def set(self, k: int, value):
        self.r[k + self.offset] = value

    def z(self, k: int) -> np.ndarray:
        """``sum_{j=0}^{N_h-1} w_j r_{k-j}`` (the caller picks left/right weights)."""
        if self.constant and k < self.n_h - 1:
            new = k  # computed values r_1..r_k; r_0 and older are history
            z = self.r0 * self.tail[:, new]
            if new:
                seg = self.r[self.offset + 1: self.offset + 1 + new]  # r_1..r_k
                z = z + np.einsum("ij,ji->i", self.w_rev[:, self.n_h - new:], seg)
            return z
        lo = k - self.n_h + 1 + self.offset
        seg = self.r[lo: lo + self.n_h]  # r_{k-N_h+1} .. r_k
        return np.einsum("ij,ji->i", self.w_rev, seg)


def _prepare(model, kernels, dt, horizon, t0, tf):
    kernels = list(kernels) if kernels is not None else list(model.kernels)
    if len(kernels) != model.n_z:
        raise ValueError(f"model has {model.n_z} memory channels but {len(kernels)} kernels were given")
    t0 = model.t_span[0] if t0 is None else t0
    tf = model.t_span[1] if tf is None else tf
    n_steps = _as_multiple(tf - t0, dt, "tf - t0")
    grid = DdeGrid.build(kernels, dt, horizon)
    return grid, t0, n_steps


def _check(x, n, t):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state at t={t:.17g}", n)


def _initial_z(model, grid, t0, mem, implicit):
    """Memory at ``t0``: the rectangle rule applied to the history."""
    if model.constant_history:
        return mem.r0 * grid.window(implicit).sum(axis=1)
    return mem.z(0) if implicit else mem.z(-1)


def _quiet(fn):
    """Run a solver with floating-point warnings silenced; divergence is checked explicitly."""
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    wrapper.__wrapped__ = fn
    return wrapper


@_quiet
def dde_explicit(model: ModelSpec, kernels=None, dt: float = 0.01, horizon: Optional[float] = None,
                 t0: Optional[float] = None, tf: Optional[float] = None) -> Trajectory:
    """Explicit Euler with a left-rectangle convolution."""
    grid, t0, n_steps = _prepare(model, kernels, dt, horizon, t0, tf)
    mem = _Memory(model, grid, t0, n_steps, implicit=False)
    x = model.x0.copy()
    times = t0 + dt * np.arange(n_steps + 1)
    X = np.empty((n_steps + 1, model.n_x))
    Z = np.empty((n_steps + 1, model.n_z))
    D = np.empty_like(X)
    X[0] = x
    Z[0] = _initial_z(model, grid, t0, mem, False)
    for n in range(n_steps):
        fx = np.asarray(model.f(times[n], x, Z[n]), dtype=float)
        D[n] = fx
        x = x + fx * dt
        _check(x, n + 1, times[n + 1])
        X[n + 1] = x
        # left rule: z_{n+1} uses r_n .. r_{n+1-N_h}
        Z[n + 1] = mem.z(n)
        mem.set(n + 1, model.h(x))
    D[-1] = model.f(times[-1], x, Z[-1])
    return Trajectory(times, X, D, memory=Z, n_steps=n_steps, n_fev=n_steps + 1, names=model.names())


@_quiet
def dde_implicit(model: ModelSpec, kernels=None, dt: float = 0.01, horizon: Optional[float] = None,
                 t0: Optional[float] = None, tf: Optional[float] = None,
                 tol: float = 1e-12, max_iter: int = 50) -> Trajectory:
    """Implicit Euler with a right-rectangle convolution and Newton per step.

    The residual ``R(x) = x - x_n - f(t_{n+1}, x, z_past + w0 * h(x)) dt`` has
    Jacobian ``I - (F + G diag(w0) H) dt`` with ``w0 = alpha(0) dt``.
    """
    grid, t0, n_steps = _prepare(model, kernels, dt, horizon, t0, tf)
    mem = _Memory(model, grid, t0, n_steps, implicit=True)
    w0 = grid.weights[:, 0]
    eye = np.eye(model.n_x)
    x = model.x0.copy()
    times = t0 + dt * np.arange(n_steps + 1)
    X = np.empty((n_steps + 1, model.n_x))
    Z = np.empty((n_steps + 1, model.n_z))
    D = np.empty_like(X)
    X[0] = x
    Z[0] = _initial_z(model, grid, t0, mem, True)
    D[0] = model.f(times[0], x, Z[0])
    n_fev = 1
    for n in range(n_steps):
        t1 = times[n + 1]
        mem.set(n + 1, 0.0)
        z_past = mem.z(n + 1)  # r_{n+1} slot is zero, so this is the j >= 1 part
        x_n = x
        xk = x_n + D[n] * dt
        for it in range(max_iter):
            r = np.asarray(model.h(xk), dtype=float)
            z = z_past + w0 * r
            fx = np.asarray(model.f(t1, xk, z), dtype=float)
            n_fev += 1
            R = xk - x_n - fx * dt
            if not np.all(np.isfinite(R)):
                raise DivergenceError(f"non-finite Newton residual at t={t1:.17g}", n + 1)
            if np.linalg.norm(R) <= tol * (1.0 + np.linalg.norm(xk)):
                break
            Jm = eye - (model.jac_x(t1, xk, z) + model.jac_z(t1, xk, z) @ (w0[:, None] * model.jac_h(xk))) * dt
            xk = xk - np.linalg.solve(Jm, R)
        else:
            raise DivergenceError(f"Newton did not converge in {max_iter} iterations at t={t1:.17g}", n + 1)
        x = xk
        _check(x, n + 1, t1)
        X[n + 1] = x
        Z[n + 1] = z
        D[n + 1] = fx
        mem.set(n + 1, r)
    return Trajectory(times, X, D, memory=Z, n_steps=n_steps, n_fev=n_fev, names=model.names())
