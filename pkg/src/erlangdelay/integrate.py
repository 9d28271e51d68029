"""One-step ODE integrators used for the chain system.

``solve_explicit`` is the Dormand-Prince 5(4) pair with a PI step-size
controller.  ``solve_implicit`` runs TR-BDF2 (default) or implicit Euler,
both L-stable, with modified Newton iterations that keep the Jacobian until
the contraction rate degrades.  Both record every accepted step together with
the derivative there, so trajectories can be resampled by cubic Hermite
interpolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import splu

__all__ = [
    "IntegrationError",
    "StiffnessError",
    "MaxStepsError",
    "NewtonError",
    "IntegratorConfig",
    "Trajectory",
    "solve_explicit",
    "solve_implicit",
    "solve",
    "hermite",
]


class IntegrationError(RuntimeError):
    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.17g})")
        self.t = t


class StiffnessError(IntegrationError):
    """Step size fell below the minimum; the problem is probably stiff."""


class MaxStepsError(IntegrationError):
    pass


class NewtonError(IntegrationError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    atol: float = 1e-8
    rtol: float = 1e-8
    first_step: Optional[float] = None
    min_step: float = 1e-14
    max_step: float = math.inf
    max_steps: int = 1_000_000
    method: str = "explicit-rk"
    scheme: str = "trbdf2"  # implicit scheme: "trbdf2" or "euler"
    fixed_step: Optional[float] = None

    def __post_init__(self):
        if self.atol < 1e-14 or self.rtol < 1e-14:
            raise ValueError("tolerances must be at least 1e-14")
        if not self.min_step < self.max_step:
            raise ValueError("min_step must be smaller than max_step")
        if self.method not in ("explicit-rk", "implicit"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.scheme not in ("trbdf2", "euler"):
            raise ValueError(f"unknown implicit scheme {self.scheme!r}")


def hermite(t, times, states, derivs):
    """Cubic Hermite interpolation of step data at the sample times ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < times[0] - 1e-12 * max(1.0, abs(times[0]))) or \
            np.any(t > times[-1] + 1e-12 * max(1.0, abs(times[-1]))):
        raise ValueError("interpolation outside the trajectory time span")
    k = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
    h = times[k + 1] - times[k]
    s = ((t - times[k]) / h)[:, None]
    hh = h[:, None]
    y0, y1 = states[k], states[k + 1]
    d0, d1 = derivs[k], derivs[k + 1]
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * hh * d0 + h01 * y1 + h11 * hh * d1


@dataclass
class Trajectory:
    """Time samples of a solution, optionally with memory outputs and step statistics."""

    times: np.ndarray
    states: np.ndarray
    derivs: Optional[np.ndarray] = None
    memory: Optional[np.ndarray] = None
    n_steps: int = 0
    n_rejected: int = 0
    n_fev: int = 0
    n_jev: int = 0
    n_lu: int = 0
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return self.times.size

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def interpolate(self, t) -> np.ndarray:
        if self.derivs is None:
            t = np.atleast_1d(t)
            return np.column_stack([np.interp(t, self.times, col) for col in self.states.T])
        return hermite(t, self.times, self.states, self.derivs)

    def resample(self, t) -> "Trajectory":
        t = np.asarray(t, dtype=float)
        states = self.interpolate(t)
        mem = None
        if self.memory is not None:
            mem = np.column_stack([np.interp(t, self.times, col) for col in np.atleast_2d(self.memory.T)])
        return replace(self, times=t, states=states, derivs=None, memory=mem)


# Dormand-Prince 5(4) tableau
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _rms(v):
    return math.sqrt(float(np.mean(v * v))) if v.size else 0.0


def _eval(rhs, t, y, counter):
    counter[0] += 1
    f = np.asarray(rhs(t, y), dtype=float)
    if not np.all(np.isfinite(f)):
        raise IntegrationError("right-hand side returned non-finite values", t)
    return f


def _initial_step(rhs, t0, y0, f0, direction, order, atol, rtol, counter):
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = _eval(rhs, t0 + direction * h0, y1, counter)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1)


def _finish(times, states, derivs, t_eval, stats, names):
    traj = Trajectory(np.array(times), np.array(states), np.array(derivs), names=names or [], **stats)
    if t_eval is not None:
        traj = traj.resample(t_eval)
    return traj


def solve_explicit(rhs: Callable, y0, t0: float, tf: float, config: IntegratorConfig = IntegratorConfig(),
                   t_eval=None, names=None) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) integration of ``y' = rhs(t, y)`` on ``[t0, tf]``."""
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("initial state must be finite", t0)
    counter = [0]
    t = float(t0)
    f = _eval(rhs, t, y, counter)
    times, states, derivs = [t], [y.copy()], [f.copy()]
    span = tf - t0
    if span <= 0:
        raise ValueError("tf must exceed t0")
    fixed = config.fixed_step
    if fixed:
        h = fixed
    elif config.first_step:
        h = config.first_step
    else:
        h = _initial_step(rhs, t, y, f, 1.0, 4, config.atol, config.rtol, counter)
    h = min(h, config.max_step, span)
    err_prev = 1e-4
    n_steps = n_rej = 0
    rejected_last = False
    K = np.empty((7, y.size))
    while t < tf:
        if n_steps >= config.max_steps:
            raise MaxStepsError(f"maximum number of steps ({config.max_steps}) reached", t)
        if fixed is None and h < config.min_step:
            raise StiffnessError(f"step size {h:.3g} below minimum; problem may be stiff", t)
        last = t + h >= tf - 1e-12 * max(1.0, abs(tf))
        if last:
            h = tf - t
        K[0] = f
        for i in range(1, 7):
            yi = y + h * (np.dot(_A[i], K[:i]))
            K[i] = _eval(rhs, t + _C[i] * h, yi, counter)
        y_new = yi  # stage 7 evaluates at the 5th order solution (FSAL)
        f_new = K[6]
        if fixed:
            err = 0.0
        else:
            err_vec = h * (_E @ K)
            scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = _rms(err_vec / scale)
        if err <= 1.0:
            t = tf if last else t + h
            y, f = y_new, f_new
            times.append(t)
            states.append(y.copy())
            derivs.append(f.copy())
            n_steps += 1
            if fixed:
                continue
            if err == 0.0:
                fac = 10.0
            else:
                fac = 0.9 * err ** -0.17 * err_prev ** 0.04
                fac = min(10.0, max(0.2, fac))
            if rejected_last:
                fac = min(fac, 1.0)
            err_prev = max(err, 1e-4)
            h = min(h * fac, config.max_step)
            rejected_last = False
        else:
            n_rej += 1
            h *= max(0.2, 0.9 * err ** -0.2)
            rejected_last = True
    stats = dict(n_steps=n_steps, n_rejected=n_rej, n_fev=counter[0])
    return _finish(times, states, derivs, t_eval, stats, names)


class _LinearSolver:
    """Factorization of ``I - gamma J`` for dense or sparse ``J``."""

    def __init__(self, J, gamma):
        n = J.shape[0]
        if sparse.issparse(J):
            M = (sparse.identity(n, format="csc") - gamma * J).tocsc()
            self._lu = splu(M)
            self._solve = self._lu.solve
        else:
            M = np.eye(n) - gamma * J
            self._lu = scipy.linalg.lu_factor(M, check_finite=False)
            self._solve = lambda b: scipy.linalg.lu_solve(self._lu, b, check_finite=False)

    def solve(self, b):
        return self._solve(b)


_GAMMA = 2.0 - math.sqrt(2.0)
_D = _GAMMA / 2.0
_W_Y = 1.0 / (_GAMMA * (2.0 - _GAMMA))
_W_N = (1.0 - _GAMMA) ** 2 / (_GAMMA * (2.0 - _GAMMA))
_ERR_C = (-3.0 * _GAMMA**2 + 4.0 * _GAMMA - 2.0) / (12.0 * (2.0 - _GAMMA))


def _newton(rhs, t, guess, const, gh, lin, scale, counter, max_iter=8, kappa=0.03):
    """Solve ``y - gh * rhs(t, y) = const`` with a frozen factorization.

    Returns ``(y, f(y), rate)`` or ``None`` on divergence.
    """
    y = guess.copy()
    dnorm_prev = None
    rate = 0.0
    for _ in range(max_iter):
        fy = _eval(rhs, t, y, counter)
        dy = lin.solve(const + gh * fy - y)
        dnorm = _rms(dy / scale)
        y = y + dy
        if dnorm_prev is not None:
            rate = dnorm / dnorm_prev if dnorm_prev > 0 else 0.0
            if rate >= 0.9:
                return None
            if rate / (1.0 - rate) * dnorm <= kappa:
                return y, _eval(rhs, t, y, counter), rate
        elif dnorm <= 1e-3 * kappa:
            return y, _eval(rhs, t, y, counter), rate
        dnorm_prev = dnorm
    return None


def solve_implicit(rhs: Callable, jacobian: Callable, y0, t0: float, tf: float,
                   config: IntegratorConfig = IntegratorConfig(method="implicit"),
                   t_eval=None, names=None) -> Trajectory:
    """Adaptive L-stable integration with modified Newton inner solves.

    ``jacobian(t, y)`` may return a dense array or a scipy sparse matrix;
    sparse matrices are factorized with SuperLU.
    """
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("initial state must be finite", t0)
    trbdf2 = config.scheme == "trbdf2"
    order = 2 if trbdf2 else 1
    counter = [0]
    n_jev = n_lu = 0
    t = float(t0)
    f = _eval(rhs, t, y, counter)
    times, states, derivs = [t], [y.copy()], [f.copy()]
    span = tf - t0
    if span <= 0:
        raise ValueError("tf must exceed t0")
    fixed = config.fixed_step
    if fixed:
        h = fixed
    elif config.first_step:
        h = config.first_step
    else:
        h = _initial_step(rhs, t, y, f, 1.0, order, config.atol, config.rtol, counter)
    h = min(h, config.max_step, span)
    J = jacobian(t, y)
    n_jev += 1
    J_fresh = True
    lin = None
    lin_h = None
    n_steps = n_rej = 0
    halvings = 0
    gcoef = _D if trbdf2 else 1.0
    while t < tf:
        if n_steps >= config.max_steps:
            raise MaxStepsError(f"maximum number of steps ({config.max_steps}) reached", t)
        if fixed is None and h < config.min_step:
            raise StiffnessError(f"step size {h:.3g} below minimum", t)
        last = t + h >= tf - 1e-12 * max(1.0, abs(tf))
        if last:
            h = tf - t
        if lin is None or lin_h != h:
            lin = _LinearSolver(J, gcoef * h)
            lin_h = h
            n_lu += 1
        scale = config.atol + config.rtol * np.abs(y)
        if fixed:
            scale = scale * 1e-3
        if trbdf2:
            const = y + _D * h * f
            stage = _newton(rhs, t + _GAMMA * h, y + _GAMMA * h * f, const, _D * h, lin, scale, counter)
            sol = None
            if stage is not None:
                y_g, f_g, rate1 = stage
                const2 = _W_Y * y_g - _W_N * y
                sol = _newton(rhs, t + h, y_g + (1 - _GAMMA) * h * f_g, const2, _D * h, lin, scale, counter)
        else:
            sol = _newton(rhs, t + h, y + h * f, y.copy(), h, lin, scale, counter)
            rate1 = 0.0
        if sol is None:
            if not J_fresh:
                J = jacobian(t, y)
                n_jev += 1
                J_fresh = True
                lin = None
                continue
            if fixed:
                raise NewtonError("Newton iteration failed at fixed step size", t)
            halvings += 1
            if halvings > 4:
                raise NewtonError("Newton iteration failed after Jacobian refresh and 4 step halvings", t)
            h *= 0.5
            n_rej += 1
            continue
        y_new, f_new, rate2 = sol
        if fixed:
            err = 0.0
        else:
            if trbdf2:
                est = _ERR_C * 2.0 * h * ((f_new - f_g) / (1.0 - _GAMMA) - (f_g - f) / _GAMMA)
            else:
                est = -0.5 * h * (f_new - f)
            est = lin.solve(est)
            scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = _rms(est / scale)
        if err <= 1.0:
            halvings = 0
            t = tf if last else t + h
            y, f = y_new, f_new
            times.append(t)
            states.append(y.copy())
            derivs.append(f.copy())
            n_steps += 1
            J_fresh = False
            if max(rate1, rate2) > 0.5:
                J = jacobian(t, y)
                n_jev += 1
                J_fresh = True
                lin = None
            if not fixed:
                fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** (-1.0 / (order + 1))))
                if 0.9 <= fac <= 1.2:
                    fac = 1.0  # keep the factorization
                h = min(h * fac, config.max_step)
        else:
            n_rej += 1
            h *= max(0.2, 0.9 * err ** (-1.0 / (order + 1)))
    stats = dict(n_steps=n_steps, n_rejected=n_rej, n_fev=counter[0], n_jev=n_jev, n_lu=n_lu)
    return _finish(times, states, derivs, t_eval, stats, names)


def solve(rhs, y0, t0, tf, config: IntegratorConfig, jacobian=None, t_eval=None, names=None) -> Trajectory:
    """Dispatch on ``config.method``."""
    if config.method == "implicit":
        if jacobian is None:
            raise ValueError("implicit integration needs an analytic Jacobian")
        return solve_implicit(rhs, jacobian, y0, t0, tf, config, t_eval=t_eval, names=names)
    return solve_explicit(rhs, y0, t0, tf, config, t_eval=t_eval, names=names)
