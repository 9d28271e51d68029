"""Linear stability of steady states of the chain system.

Eigenvalues of the augmented Jacobian are computed with LAPACK's dense
nonsymmetric solver (balancing, Hessenberg reduction, shifted QR).  Away from
the chain poles ``-a_i`` they are roots of the reduced characteristic
function ``det(F - lam I + G Q(lam) H)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import integrate, sparse

from .kernels import KernelSpec
from .lct import LctSystem, ModelSpec, augmented_jacobian, steady_memory, steady_state

__all__ = [
    "EigenError",
    "PoleError",
    "SpectrumReport",
    "augmented_jacobian",
    "eigenvalues",
    "q_matrix",
    "reduced_char",
    "char_integral",
    "spectrum_report",
    "scan_parameter",
    "MAX_DENSE_DIM",
]

log = logging.getLogger(__name__)

MAX_DENSE_DIM = 2000


class EigenError(RuntimeError):
    pass


class PoleError(ValueError):
    pass


def eigenvalues(J, vectors: bool = False):
    """All eigenvalues of a real square matrix (optionally with right eigenvectors)."""
    J = J.toarray() if sparse.issparse(J) else np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError("eigenvalues need a square matrix")
    if not np.all(np.isfinite(J)):
        raise ValueError("matrix has non-finite entries")
    try:
        if vectors:
            w, v = scipy.linalg.eig(J, check_finite=False)
            return w, v
        return scipy.linalg.eigvals(J, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise EigenError(f"QR iteration failed: {exc}") from exc


def q_matrix(lct: LctSystem, lam: complex) -> np.ndarray:
    """Diagonal matrix of ``Q_ii(lam) = sum_m c_m (a_i / (a_i + lam))^(m+1)``."""
    q = np.empty(lct.n_z, dtype=complex)
    for i, mix in enumerate(lct.mixtures):
        a = mix.rate
        if abs(lam + a) < 1e-12 * a:
            raise PoleError(f"lambda={lam} is at the pole -a_{i}={-a}")
        ratio = a / (a + lam)
        powers = ratio ** np.arange(1, mix.order + 2)
        q[i] = np.dot(mix.coefficients, powers)
    return np.diag(q)


def _det_lu(M) -> complex:
    M = np.array(M, dtype=complex)
    scale = np.abs(M).max(axis=1)
    scale[scale == 0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)  # an exact zero is a valid answer
        lu, piv = scipy.linalg.lu_factor(M / scale[:, None], check_finite=False)
    sign = (-1) ** int(np.sum(piv != np.arange(piv.size)))
    return complex(sign * np.prod(np.diag(lu)) * np.prod(scale))


def reduced_char(F, G, H, lct: LctSystem, lam: complex) -> complex:
    """``det(F - lam I + G Q(lam) H)`` via LU with partial pivoting."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    M = F - lam * np.eye(F.shape[0]) + G @ q_matrix(lct, lam) @ H
    return _det_lu(M)


def char_integral(kernel: KernelSpec, lam: complex, t_h: float, tol: float = 1e-10) -> complex:
    """``int_0^t_h exp(-lam s) alpha(s) ds`` by adaptive quadrature."""
    lam = complex(lam)

    def part(fun):
        val, err, *rest = integrate.quad(fun, 0.0, t_h, epsabs=tol, epsrel=tol,
                                         limit=500, full_output=1)
        if len(rest) >= 2 and err > 100 * tol * max(1.0, abs(val)):
            raise integrate.IntegrationWarning(
                f"characteristic integral did not converge (partial value {val})")
        return val

    re = part(lambda s: float(np.exp(-lam.real * s) * math.cos(lam.imag * s) * kernel.density(s)))
    im = part(lambda s: float(-np.exp(-lam.real * s) * math.sin(lam.imag * s) * kernel.density(s)))
    return complex(re, im)


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    max_real: float
    chain: np.ndarray  # boolean mask, True near some -a_i
    residuals: np.ndarray  # |reduced_char| at non-chain eigenvalues, nan for chain ones

    @property
    def stable(self) -> bool:
        return self.max_real < 0


def spectrum_report(model: ModelSpec, lct: LctSystem, x_bar, t: float = 0.0,
                    pole_guard: float = 1e-3) -> SpectrumReport:
    """Spectrum of the augmented Jacobian at a steady state with reduced-equation residuals."""
    x_bar = np.asarray(x_bar, dtype=float)
    r_bar = np.asarray(model.h(x_bar), dtype=float)
    Z_bar = steady_memory(lct, r_bar)
    J = augmented_jacobian(model, lct, x_bar, Z_bar, t, as_sparse=False)
    if J.shape[0] > MAX_DENSE_DIM:
        raise ValueError(f"dimension {J.shape[0]} exceeds {MAX_DENSE_DIM}; lower the mixture order")
    lam = eigenvalues(J)
    rates = np.array([m.rate for m in lct.mixtures])
    chain = np.any(np.abs(lam[:, None] + rates[None, :]) <= pole_guard * rates[None, :], axis=1)
    F = model.jac_x(t, x_bar, r_bar)
    G = model.jac_z(t, x_bar, r_bar)
    H = model.jac_h(x_bar)
    res = np.full(lam.size, np.nan)
    for k in np.flatnonzero(~chain):
        res[k] = abs(reduced_char(F, G, H, lct, lam[k]))
    return SpectrumReport(lam, float(lam.real.max()), chain, res)


def _scan_point(value, model_factory, lct_builder, guess, dump):
    row = {"value": value, "x_bar": None, "max_real": float("nan"), "error": "", "spectrum": None}
    try:
        model = model_factory(value)
        lct = lct_builder(value)
        x_bar = steady_state(model, guess)
        rep = spectrum_report(model, lct, x_bar)
        row.update(x_bar=x_bar, max_real=rep.max_real)
        if dump:
            row["spectrum"] = rep.eigenvalues
    except Exception as exc:  # recorded per point, scan continues
        log.warning("scan point %r failed: %s", value, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def scan_parameter(model_factory: Callable, lct_builder: Callable, grid: Sequence[float],
                   guess, dump_spectrum: bool = False, workers: int = 1) -> list:
    """Steady state and largest real eigenvalue part for each grid value.

    ``model_factory(value)`` returns a :class:`ModelSpec` and
    ``lct_builder(value)`` an :class:`LctSystem`.  Rows come back in grid order.
    """
    grid = list(grid)
    if workers <= 1:
        return [_scan_point(v, model_factory, lct_builder, guess, dump_spectrum) for v in grid]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: _scan_point(v, model_factory, lct_builder, guess,
                                                   dump_spectrum), grid))
