"""Erlang mixture approximation of a regular kernel.

The approximation interval ``[0, t_h]`` is found by bisection on the tail
mass ``1 - beta(t)``.  Coefficients and rate are then fitted by minimizing the
left-rectangle least-squares objective

    phi(c, a) = 1/2 * sum_k (alpha(t_k) - alpha_hat(t_k))^2 * dt

over the probability simplex in ``c`` and ``a >= a_min``.  The objective is
linear in ``c``, so for a fixed rate the coefficients come from an exact
active-set solve; the rate is updated by a safeguarded Newton iteration on
the reduced objective, with golden-section search as a fallback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .kernels import ErlangMixture, KernelSpec, _deriv_from_table, erlang_table

__all__ = [
    "QuadratureError",
    "HorizonError",
    "HorizonResult",
    "FitProblem",
    "FitResult",
    "beta",
    "tail_mass",
    "find_horizon",
    "objective",
    "simplex_lstsq",
    "project_simplex",
    "fit_least_squares",
    "fit_theoretical",
    "kernel_error",
]


class QuadratureError(RuntimeError):
    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


class HorizonError(RuntimeError):
    pass


def _quad(fun, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=400):
    with np.errstate(all="ignore"):
        val, err, *rest = integrate.quad(fun, lo, hi, epsabs=epsabs, epsrel=epsrel,
                                         limit=limit, full_output=1)
    if len(rest) >= 2 and err > max(1e3 * epsabs, 1e3 * epsrel * abs(val)):
        raise QuadratureError(f"quadrature on [{lo}, {hi}] did not converge "
                              f"(error estimate {err:.3g})", val)
    return val


def _scalar_density(kernel):
    return lambda s: float(kernel.density(s))


def beta(kernel: KernelSpec, t: float) -> float:
    """Cumulative kernel mass on ``[0, t]``; analytic when the kernel provides it."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return 0.0
    if kernel.cdf is not None:
        return float(kernel.cdf(t))
    return _quad(_scalar_density(kernel), 0.0, t)


def tail_mass(kernel: KernelSpec, t: float) -> float:
    """``1 - beta(t)`` evaluated without cancellation where possible."""
    if t <= 0:
        return 1.0
    if kernel.sf is not None:
        return float(kernel.sf(t))
    if kernel.cdf is not None:
        return 1.0 - float(kernel.cdf(t))
    return _quad(_scalar_density(kernel), t, np.inf, epsabs=1e-300, epsrel=1e-11)


@dataclass(frozen=True)
class HorizonResult:
    t_h: float
    epsilon: float
    iterations: int
    residual: float


def find_horizon(kernel: KernelSpec, epsilon: float, bracket=None,
                 tol: Optional[float] = None, max_iter: int = 500) -> HorizonResult:
    """Bisection for ``1 - beta(t_h) = epsilon``.

    An invalid bracket is repaired: the lower end is pulled to 0 if it is past
    the root and the upper end is doubled (up to 200 times) until the tail
    mass drops below ``epsilon``. The default ``tol`` is relative to
    ``epsilon`` and tight enough that bisection usually ends when the bracket
    can no longer be split.
    """
    if not (0 < epsilon < 1):
        raise ValueError("epsilon must lie in (0, 1)")
    tol = 1e-9 * epsilon if tol is None else tol
    lo, hi = (0.0, kernel.support) if bracket is None else map(float, bracket)
    if tail_mass(kernel, lo) <= epsilon:
        lo = 0.0
    doublings = 0
    while tail_mass(kernel, hi) >= epsilon:
        lo, hi = hi, 2.0 * hi if hi > 0 else 1.0
        doublings += 1
        if doublings > 200:
            raise HorizonError("kernel tail never reaches epsilon")
    it = 0
    while True:
        it += 1
        mid = 0.5 * (lo + hi)
        g = tail_mass(kernel, mid) - epsilon
        if abs(g) < tol or it >= max_iter or not (lo < mid < hi):
            return HorizonResult(mid, epsilon, it, abs(g))
        if g < 0:
            hi = mid
        else:
            lo = mid


@dataclass
class FitProblem:
    """Sampled least-squares problem on ``t_k = k * t_h / N``, ``k = 0..N-1``."""

    kernel: KernelSpec
    order: int
    horizon: float
    samples: int = 0
    a_min: float = 0.0
    grid: np.ndarray = field(init=False, repr=False)
    target: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be non-negative")
        if self.samples <= 0:
            self.samples = 4 * (self.order + 1)
        if self.samples < self.order + 1:
            raise ValueError("need at least order + 1 samples")
        if self.a_min <= 0:
            self.a_min = 1e-6 / self.horizon
        self.grid = np.arange(self.samples) * self.step
        self.target = np.asarray(self.kernel.density(self.grid), dtype=float)

    @property
    def step(self) -> float:
        return self.horizon / self.samples


def objective(problem: FitProblem, coefficients, rate: float, derivatives: bool = True):
    """Objective value, gradient and Hessian over ``(c_0..c_M, a)``."""
    c = np.asarray(coefficients, dtype=float)
    dt = problem.step
    tab = erlang_table(problem.order, rate, problem.grid)
    resid = problem.target - c @ tab
    phi = 0.5 * float(resid @ resid) * dt
    if not derivatives:
        return phi
    d1 = _deriv_from_table(tab, rate, problem.grid, 1)
    d2 = _deriv_from_table(tab, rate, problem.grid, 2)
    da = c @ d1
    n = c.size
    grad = np.empty(n + 1)
    grad[:n] = -(tab @ resid) * dt
    grad[n] = -float(da @ resid) * dt
    hess = np.empty((n + 1, n + 1))
    hess[:n, :n] = (tab @ tab.T) * dt
    cross = -(d1 @ resid - tab @ da) * dt
    hess[:n, n] = cross
    hess[n, :n] = cross
    hess[n, n] = -float((c @ d2) @ resid - da @ da) * dt
    return phi, grad, hess


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{c >= 0, sum(c) = 1}``."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _eq_lstsq(A, b):
    """Least squares on columns ``A`` with ``sum(x) = 1``, via a null-space basis."""
    k = A.shape[1]
    if k == 1:
        return np.ones(1)
    # Householder-style orthonormal basis of {x : sum(x) = 0}
    e = np.ones(k) / math.sqrt(k)
    v = e.copy()
    v[0] += 1.0
    Q = np.eye(k) - np.outer(v, v) / v[0]
    Z = Q[:, 1:]
    x0 = np.full(k, 1.0 / k)
    y = np.linalg.lstsq(A @ Z, b - A @ x0, rcond=None)[0]
    return x0 + Z @ y


def simplex_lstsq(A, b, x0=None, tol=1e-13, max_iter=None):
    """Active-set solve of ``min ||A x - b||`` subject to ``x >= 0``, ``sum(x) = 1``.

    Returns ``(x, multiplier_residual)``.  The residual is the largest
    violation of the dual feasibility conditions at the returned point.
    """
    n = A.shape[1]
    max_iter = 10 * n + 50 if max_iter is None else max_iter
    x = project_simplex(np.full(n, 1.0 / n) if x0 is None else x0)
    free = x > 0
    if not free.any():
        free[np.argmax(x)] = True
    scale = max(1.0, float(np.linalg.norm(A, 2) * max(np.linalg.norm(b), 1.0)))
    for _ in range(max_iter):
        idx = np.flatnonzero(free)
        xf = _eq_lstsq(A[:, idx], b)
        if np.all(xf > 0):
            x = np.zeros(n)
            x[idx] = xf
            g = A.T @ (A @ x - b)
            nu = -float(np.mean(g[idx]))
            mult = g + nu
            mult[idx] = 0.0
            j = int(np.argmin(mult))
            if mult[j] >= -tol * scale:
                break
            free[j] = True
            continue
        # step from x toward the unconstrained point until a free entry hits zero
        d = xf - x[idx]
        neg = d < 0
        steps = np.where(neg, x[idx] / np.where(neg, -d, 1.0), np.inf)
        step = min(1.0, float(steps.min()))
        x_new = x.copy()
        x_new[idx] = x[idx] + step * d
        hit = idx[steps <= step * (1 + 1e-12)]
        x_new[hit] = 0.0
        x_new = np.maximum(x_new, 0.0)
        x_new /= x_new.sum()
        x = x_new
        free = x > 0
        if not free.any():
            free[np.argmax(xf)] = True
    g = A.T @ (A @ x - b)
    on = x > 0
    nu = -float(np.mean(g[on]))
    viol = np.where(on, np.abs(g + nu), np.maximum(-(g + nu), 0.0))
    return x, float(viol.max()) / scale


@dataclass
class FitResult:
    mixture: ErlangMixture
    objective: float
    kernel_error: float
    method: str
    converged: bool = True
    iterations: int = 0
    kkt_residual: float = 0.0
    horizon: float = float("nan")
    history: list = field(default_factory=list, repr=False)


def _coeff_solve(problem: FitProblem, rate: float, c0=None):
    w = math.sqrt(problem.step)
    A = erlang_table(problem.order, rate, problem.grid).T * w
    b = problem.target * w
    c, _ = simplex_lstsq(A, b, x0=c0)
    return c


def _reduced_derivs(problem, c, rate):
    """Objective value and first/second derivative of ``min_c phi(c, a)`` in ``a``."""
    phi, g, H = objective(problem, c, rate)
    n = c.size
    free = np.flatnonzero(c > 0)
    ga = g[n]
    haa = H[n, n]
    if free.size > 1:
        k = free.size
        e = np.ones(k) / math.sqrt(k)
        v = e.copy()
        v[0] += 1.0
        Z = (np.eye(k) - np.outer(v, v) / v[0])[:, 1:]
        Hff = Z.T @ H[np.ix_(free, free)] @ Z
        hfa = Z.T @ H[free, n]
        corr = np.linalg.lstsq(Hff, hfa, rcond=1e-14)[0]
        haa = haa - float(hfa @ corr)
    return phi, ga, haa


def _kkt(problem, c, rate, ga):
    _, g, _ = objective(problem, c, rate)
    n = c.size
    gc = g[:n]
    on = c > 0
    nu = -float(np.mean(gc[on]))
    viol_c = np.where(on, np.abs(gc + nu), np.maximum(-(gc + nu), 0.0)).max()
    viol_a = abs(ga) * rate if rate > problem.a_min * (1 + 1e-12) else max(-ga, 0.0) * rate
    return float(max(viol_c, viol_a))


def fit_least_squares(problem: FitProblem, init: Optional[ErlangMixture] = None,
                      tol: float = 1e-8, max_iter: int = 500, scan: bool = True,
                      error_points: int = 10_000) -> FitResult:
    """Least-squares Erlang mixture fit of ``problem.kernel``.

    ``init`` defaults to the theoretical mixture of the same order.  With
    ``scan`` a coarse logarithmic scan of the rate around the initial value
    picks the starting rate; the returned objective never exceeds the value
    at ``init``.
    """
    if init is None:
        init = fit_theoretical(problem.kernel, problem.order, problem.horizon,
                               error_points=0).mixture
    if init.order != problem.order:
        raise ValueError("initial mixture order does not match the problem")
    c_init = project_simplex(init.coefficients)
    a = max(init.rate, problem.a_min)
    phi_init = objective(problem, c_init, a, derivatives=False)

    cache = {}

    def reduced(rate, c_start=None):
        key = float(rate)
        if key not in cache:
            c = _coeff_solve(problem, rate, c_start)
            cache[key] = (objective(problem, c, rate, derivatives=False), c)
        return cache[key]

    best_phi, best_c = reduced(a, c_init)
    if scan:
        a_start = a
        for f in np.geomspace(0.25, 4.0, 17):
            r = max(a_start * f, problem.a_min)
            p, c = reduced(r, best_c)
            if p < best_phi:
                best_phi, best_c, a = p, c, r

    history = [(a, best_phi)]
    converged = False
    kkt = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        phi, ga, haa = _reduced_derivs(problem, best_c, a)
        kkt = _kkt(problem, best_c, a, ga)
        if kkt <= tol:
            converged = True
            break
        # Newton step with trust region [a/4, 4a] and bound a >= a_min
        if haa > 0:
            step = -ga / haa
        else:
            step = -math.copysign(0.5 * a, ga)
        step = float(np.clip(step, -0.75 * a, 3.0 * a))
        improved = False
        for _ in range(30):
            trial = max(a + step, problem.a_min)
            p, c = reduced(trial, best_c)
            if p < phi - 1e-4 * abs(step * ga) or (p <= phi and abs(step) < 1e-12 * a):
                improved = True
                break
            step *= 0.5
        if not improved:
            trial, p, c = _golden(reduced, a, problem.a_min, best_c)
            if p >= phi:
                # no descent in a: stationary to working precision
                converged = kkt <= max(tol, 1e3 * np.finfo(float).eps * max(phi, 1e-300))
                break
        a, best_phi, best_c = trial, p, c
        history.append((a, best_phi))
        if len(cache) > 4000:
            cache.clear()

    if best_phi > phi_init:
        best_phi, best_c, a = phi_init, c_init, init.rate
    mix = ErlangMixture(a, _clean(best_c))
    err = kernel_error(mix, problem.kernel, error_points, problem.horizon) if error_points else float("nan")
    return FitResult(mix, best_phi, err, "least-squares", converged, it, kkt,
                     problem.horizon, history)


def _clean(c):
    c = np.maximum(np.asarray(c, float), 0.0)
    return c / c.sum()


def _golden(reduced, a, a_min, c_start, iters=60):
    lo, hi = max(a / 4.0, a_min), 4.0 * a
    invphi = (math.sqrt(5) - 1) / 2
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1 = reduced(x1, c_start)[0]
    f2 = reduced(x2, c_start)[0]
    for _ in range(iters):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = reduced(x1, c_start)[0]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = reduced(x2, c_start)[0]
        if hi - lo < 1e-13 * hi:
            break
    x = x1 if f1 < f2 else x2
    p, c = reduced(x, c_start)
    return x, p, c


def fit_theoretical(kernel: KernelSpec, order: int, horizon: float, rate: Optional[float] = None,
                    samples: int = 0, error_points: int = 10_000) -> FitResult:
    """Mixture with coefficients equal to the kernel mass on ``[m/a, (m+1)/a)``.

    The rate defaults to ``(order + 1) / horizon`` so the ``order + 1``
    intervals cover ``[0, horizon]``.  Coefficients are not rescaled.
    """
    a = (order + 1) / horizon if rate is None else float(rate)
    s = np.arange(order + 2) / a
    c = np.empty(order + 1)
    if kernel.cdf is not None:
        cdf = np.asarray(kernel.cdf(s), float)
        sf = np.asarray(kernel.sf(s), float) if kernel.sf is not None else 1.0 - cdf
        upper = cdf[:-1] >= 0.5
        c = np.where(upper, sf[:-1] - sf[1:], cdf[1:] - cdf[:-1])
    else:
        dens = _scalar_density(kernel)
        for m in range(order + 1):
            c[m] = _quad(dens, s[m], s[m + 1], epsabs=1e-15, epsrel=1e-13)
    c = np.clip(c, 0.0, 1.0)
    mix = ErlangMixture(a, c, sum_tol=max(1e-12, 1e-6))
    problem = FitProblem(kernel, order, horizon, samples)
    problem_phi = objective(problem, mix.coefficients, a, derivatives=False)
    err = kernel_error(mix, kernel, error_points, horizon) if error_points else float("nan")
    return FitResult(mix, problem_phi, err, "theoretical", True, 0, 0.0, horizon)


def kernel_error(mixture: ErlangMixture, kernel: KernelSpec, points: int, horizon: float) -> float:
    """``sum_k (alpha_hat(t_k) - alpha(t_k))^2 dt`` on ``points`` left-rectangle nodes."""
    if points < 2:
        raise ValueError("need at least two points")
    dt = horizon / points
    t = np.arange(points) * dt
    diff = mixture(t) - np.asarray(kernel.density(t), float)
    return float(diff @ diff) * dt
