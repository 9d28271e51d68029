"""Regular kernels, Erlang kernels, Erlang mixtures and the Erlang delta family.

All densities are vectorized over ``t`` and return numpy arrays (or floats
for scalar input).  Erlang kernels are evaluated with the multiplicative
recursion ``l_m(t) = (a t / m) l_{m-1}(t)`` starting from ``l_0(t) = a e^{-a t}``;
once the recursion underflows the values are zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import erf, erfc

__all__ = [
    "KernelError",
    "ErlangKernel",
    "ErlangMixture",
    "KernelSpec",
    "FoldedNormalSumKernel",
    "PrecursorKernel",
    "DeltaFamily",
    "erlang_eval",
    "erlang_table",
    "erlang_deriv_a",
    "mixture_eval",
    "delta_family_stats",
    "folded_normal",
    "make_kernel",
    "KERNEL_FAMILIES",
]


class KernelError(ValueError):
    """Invalid kernel parameters or kernel arguments."""


def _check_rate(a):
    if not (a > 0) or not math.isfinite(a):
        raise KernelError(f"rate must be positive and finite, got {a!r}")


def _as_time(t):
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise KernelError("time arguments must be finite and non-negative")
    return arr


def _ret(arr, scalar):
    return float(arr) if scalar else arr


def erlang_table(order: int, a: float, t) -> np.ndarray:
    """Return ``l_m(t)`` for ``m = 0..order`` as an array of shape ``(order + 1, len(t))``."""
    _check_rate(a)
    t = np.atleast_1d(_as_time(t))
    out = np.empty((order + 1, t.size))
    out[0] = a * np.exp(-a * t)
    at = a * t
    for m in range(1, order + 1):
        out[m] = out[m - 1] * (at / m)
    return out


def erlang_eval(m: int, a: float, t):
    """Density of the ``m``'th order Erlang kernel with rate ``a``."""
    if m < 0 or int(m) != m:
        raise KernelError(f"order must be a non-negative integer, got {m!r}")
    scalar = np.ndim(t) == 0
    vals = erlang_table(int(m), a, t)[int(m)]
    return _ret(vals[0] if scalar else vals, scalar)


def _deriv_from_table(table, a, t, order):
    m1 = np.arange(table.shape[0])[:, None] + 1.0
    w = m1 / a - np.atleast_1d(t)[None, :]
    d1 = w * table
    if order == 1:
        return d1
    return w * d1 - (m1 / a**2) * table


def erlang_deriv_a(m: int, a: float, t, order: int = 1):
    """First or second derivative of ``l_m(t)`` with respect to the rate ``a``."""
    if order not in (1, 2):
        raise KernelError("derivative order must be 1 or 2")
    if m < 0 or int(m) != m:
        raise KernelError(f"order must be a non-negative integer, got {m!r}")
    scalar = np.ndim(t) == 0
    tab = erlang_table(int(m), a, t)
    vals = _deriv_from_table(tab, a, t, order)[int(m)]
    return _ret(vals[0] if scalar else vals, scalar)


@dataclass(frozen=True)
class ErlangKernel:
    order: int
    rate: float

    def __post_init__(self):
        _check_rate(self.rate)
        if self.order < 0 or int(self.order) != self.order:
            raise KernelError("order must be a non-negative integer")

    def __call__(self, t):
        return erlang_eval(self.order, self.rate, t)


@dataclass(frozen=True)
class ErlangMixture:
    """Erlang mixture kernel ``sum_m c_m l_m(t)`` with a shared rate.

    ``sum_tol`` bounds ``|sum(c) - 1|``; the theoretical reference fit keeps
    the unscaled coefficients and therefore passes a looser value.
    """

    rate: float
    coefficients: np.ndarray
    sum_tol: float = field(default=1e-12, compare=False)

    def __post_init__(self):
        _check_rate(self.rate)
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.size == 0:
            raise KernelError("mixture needs at least one coefficient")
        if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
            raise KernelError("mixture coefficients must lie in [0, 1]")
        if abs(c.sum() - 1.0) > self.sum_tol:
            raise KernelError(f"mixture coefficients sum to {c.sum():.17g}, not 1")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def order(self) -> int:
        return self.coefficients.size - 1

    def __call__(self, t):
        return mixture_eval(self, t)

    def mean(self) -> float:
        m = np.arange(self.coefficients.size)
        return float(np.dot(self.coefficients, (m + 1) / self.rate))


def mixture_eval(mix: ErlangMixture, t):
    scalar = np.ndim(t) == 0
    vals = mix.coefficients @ erlang_table(mix.order, mix.rate, t)
    return _ret(vals[0] if scalar else vals, scalar)


def delta_family_stats(a: float, t: float) -> tuple[float, float]:
    """Mean ``t + 1/(2a)`` and variance ``t/a + 1/(12 a^2)`` of the delta family at ``t``."""
    _check_rate(a)
    if t < 0:
        raise KernelError("t must be non-negative")
    return t + 1.0 / (2.0 * a), t / a + 1.0 / (12.0 * a * a)


@dataclass(frozen=True)
class DeltaFamily:
    """Piecewise-constant-in-``s`` family ``delta_a(t, s) = l_m(t)`` for ``s`` in ``[m/a, (m+1)/a)``."""

    rate: float

    def __post_init__(self):
        _check_rate(self.rate)

    @property
    def width(self) -> float:
        return 1.0 / self.rate

    def __call__(self, t: float, s):
        s = _as_time(s)
        m = np.floor(s * self.rate).astype(int)
        order = int(m.max()) if m.size else 0
        tab = erlang_table(order, self.rate, t)[:, 0]
        return tab[m]

    def stats(self, t: float) -> tuple[float, float]:
        return delta_family_stats(self.rate, t)


# -- regular kernels ---------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """A regular kernel: density, optional cumulative and tail mass, and a bound.

    ``support`` is a time beyond which the density is negligible; it is only
    used as a scan range and as a starting bracket for horizon searches.
    """

    name: str
    density: Callable
    bound: float
    support: float
    cdf: Optional[Callable] = None
    sf: Optional[Callable] = None
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, t):
        return self.density(t)


def _scan_bound(density, support, n=10_000):
    grid = np.linspace(0.0, support, n)
    vals = np.asarray(density(grid), dtype=float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise KernelError("kernel density must be finite and non-negative")
    return 1.05 * float(vals.max())


def folded_normal(t, mu: float, sigma: float):
    """Density of ``|X|`` with ``X ~ N(mu, sigma^2)``."""
    t = np.asarray(t, dtype=float)
    z1 = (t - mu) / sigma
    z2 = (t + mu) / sigma
    return (np.exp(-0.5 * z1 * z1) + np.exp(-0.5 * z2 * z2)) / (math.sqrt(2 * math.pi) * sigma)


def _folded_normal_cdf(t, mu, sigma):
    t = np.asarray(t, dtype=float)
    s = math.sqrt(2.0) * sigma
    return 0.5 * (erf((t - mu) / s) + erf((t + mu) / s))


def _folded_normal_sf(t, mu, sigma):
    t = np.asarray(t, dtype=float)
    s = math.sqrt(2.0) * sigma
    return 0.5 * (erfc((t - mu) / s) + erfc((t + mu) / s))


@dataclass(frozen=True)
class FoldedNormalSumKernel:
    weights: tuple
    locations: tuple
    scales: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if not (len(self.weights) == len(self.locations) == len(self.scales)):
            raise KernelError("weights, locations and scales must have equal length")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise KernelError("folded-normal weights must lie in [0, 1] and sum to 1")
        if np.any(np.asarray(self.scales, float) <= 0):
            raise KernelError("folded-normal scales must be positive")

    def density(self, t):
        return sum(w * folded_normal(t, m, s)
                   for w, m, s in zip(self.weights, self.locations, self.scales))

    def cdf(self, t):
        return sum(w * _folded_normal_cdf(t, m, s)
                   for w, m, s in zip(self.weights, self.locations, self.scales))

    def sf(self, t):
        return sum(w * _folded_normal_sf(t, m, s)
                   for w, m, s in zip(self.weights, self.locations, self.scales))

    @property
    def support(self) -> float:
        return max(abs(m) + 12.0 * s for m, s in zip(self.locations, self.scales))


@dataclass(frozen=True)
class PrecursorKernel:
    """Decaying sum of folded normals describing precursor recirculation.

    Scales grow by 3/2 and locations shift by the previous scale from term
    to term.  The normalization uses the closed-form Laplace transform of the
    folded normal density.
    """

    decay: float
    mu1: float = 2.0
    sigma1: float = 0.1
    n_terms: int = 7

    def __post_init__(self):
        if self.decay <= 0 or self.sigma1 <= 0 or self.n_terms < 1:
            raise KernelError("precursor kernel needs decay > 0, sigma1 > 0, n_terms >= 1")

    @property
    def locations(self) -> np.ndarray:
        mu, sig = self._params()
        return mu

    @property
    def scales(self) -> np.ndarray:
        return self._params()[1]

    def _params(self):
        mu = np.empty(self.n_terms)
        sig = np.empty(self.n_terms)
        mu[0], sig[0] = self.mu1, self.sigma1
        for j in range(self.n_terms - 1):
            sig[j + 1] = 1.5 * sig[j]
            mu[j + 1] = mu[j] + sig[j]
        return mu, sig

    @property
    def normalization(self) -> float:
        lam = self.decay
        mu, sig = self._params()
        total = 0.0
        for m, s in zip(mu, sig):
            root2s = math.sqrt(2.0) * s
            total += 0.5 * math.exp(0.5 * s * s * lam * lam) * (
                math.exp(lam * m) * math.erfc((lam * s * s + m) / root2s)
                + math.exp(-lam * m) * math.erfc((lam * s * s - m) / root2s))
        return 1.0 / total

    def unnormalized(self, t):
        t = np.asarray(t, dtype=float)
        mu, sig = self._params()
        return np.exp(-self.decay * t) * sum(folded_normal(t, m, s) for m, s in zip(mu, sig))

    def density(self, t):
        return self.normalization * self.unnormalized(t)

    @property
    def support(self) -> float:
        mu, sig = self._params()
        return float(mu[-1] + 12.0 * sig[-1])


def _quad_mass(density, support):
    pieces = np.linspace(0.0, support, 9)
    total = 0.0
    for lo, hi in zip(pieces[:-1], pieces[1:]):
        total += integrate.quad(density, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    total += integrate.quad(density, support, np.inf, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return total


def _gaussian_halfline():
    c = 2.0 / math.sqrt(math.pi)

    def density(t):
        t = np.asarray(t, dtype=float)
        return c * np.exp(-t * t)

    return KernelSpec("gaussian-halfline", density, bound=1.05 * c, support=7.0,
                      cdf=lambda t: erf(np.asarray(t, float)),
                      sf=lambda t: erfc(np.asarray(t, float)))


def _exponential(rate=1.0):
    _check_rate(rate)

    def density(t):
        return rate * np.exp(-rate * np.asarray(t, dtype=float))

    return KernelSpec("exponential", density, bound=1.05 * rate, support=40.0 / rate,
                      cdf=lambda t: -np.expm1(-rate * np.asarray(t, float)),
                      sf=lambda t: np.exp(-rate * np.asarray(t, float)),
                      params={"rate": rate})


def _folded_normal_sum(weights=(1.0,), locations=(0.0,), scales=(1.0,)):
    k = FoldedNormalSumKernel(tuple(weights), tuple(locations), tuple(scales))
    return KernelSpec("folded-normal-sum", k.density, _scan_bound(k.density, k.support),
                      k.support, cdf=k.cdf, sf=k.sf,
                      params={"weights": list(weights), "locations": list(locations),
                              "scales": list(scales)})


def _precursor(decay, mu1=2.0, sigma1=0.1, n_terms=7):
    k = PrecursorKernel(decay, mu1, sigma1, int(n_terms))
    gamma = k.normalization
    base = k.unnormalized

    def density(t):
        return gamma * base(t)

    return KernelSpec("precursor", density, _scan_bound(density, k.support), k.support,
                      params={"decay": decay, "mu1": mu1, "sigma1": sigma1,
                              "n_terms": int(n_terms), "normalization": gamma})


def _erlang_mixture(rate, coefficients):
    mix = ErlangMixture(rate, np.asarray(coefficients, float))
    m = mix.order + 1
    support = (m + 12.0 * math.sqrt(m) + 40.0) / rate
    return KernelSpec("erlang-mixture", mix, _scan_bound(mix, support), support,
                      params={"rate": rate, "coefficients": list(mix.coefficients)})


def _custom(density, support=10.0):
    """Normalize an arbitrary non-negative density by its quadrature integral."""
    mass = _quad_mass(lambda s: float(density(s)), support)
    if not math.isfinite(mass) or not (1e-8 <= mass <= 1e8):
        raise KernelError(f"cannot normalize density with integral {mass!r}")

    def normalized(t):
        return np.asarray(density(np.asarray(t, float)), dtype=float) / mass

    return KernelSpec("custom", normalized, _scan_bound(normalized, support), support,
                      params={"mass": mass})


KERNEL_FAMILIES = {
    "gaussian-halfline": _gaussian_halfline,
    "exponential": _exponential,
    "folded-normal-sum": _folded_normal_sum,
    "precursor": _precursor,
    "erlang-mixture": _erlang_mixture,
    "custom": _custom,
}


def make_kernel(name: str, **params) -> KernelSpec:
    """Build a named kernel family; see ``KERNEL_FAMILIES`` for the ids."""
    try:
        factory = KERNEL_FAMILIES[name]
    except KeyError:
        raise KernelError(f"unknown kernel family {name!r}; "
                          f"choose from {sorted(KERNEL_FAMILIES)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise KernelError(f"bad parameters for kernel {name!r}: {exc}") from None
