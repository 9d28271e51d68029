"""Linear chain trick realization of a DDE with Erlang mixture kernels.

A model ``x' = f(t, x, z)``, ``z = alpha * h(x)`` (convolution per channel)
becomes the ODE system

    x' = f(t, x, C Z),    Z' = A Z + B h(x)

where each channel contributes a chain ``z_0' = a (r - z_0)``,
``z_m' = a (z_{m-1} - z_m)`` of length ``M_i + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from .kernels import ErlangMixture, erlang_table

__all__ = [
    "SteadyStateError",
    "ModelSpec",
    "LctSystem",
    "build_lct",
    "augmented_rhs",
    "initial_memory",
    "steady_state",
    "steady_memory",
    "augmented_jacobian",
    "LctOde",
    "SPARSE_THRESHOLD",
]

SPARSE_THRESHOLD = 200


class SteadyStateError(RuntimeError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class ModelSpec:
    """A distributed-delay system ``x' = f(t, x, z)`` with memory input ``r = h(x)``.

    ``f``, ``jac_x`` (F) and ``jac_z`` (G) take ``(t, x, z)``; ``h`` and
    ``jac_h`` (H) take ``x``.  ``history`` is either a constant state or a
    callable ``t -> x`` valid for ``t <= t0``.  ``kernels`` holds the true
    (regular) kernel of each memory channel when the model carries one.
    """

    name: str
    n_x: int
    n_z: int
    f: Callable
    h: Callable
    jac_x: Callable
    jac_z: Callable
    jac_h: Callable
    history: Union[np.ndarray, Callable]
    kernels: tuple = ()
    t_span: tuple = (0.0, 1.0)
    params: dict = field(default_factory=dict)
    state_names: tuple = ()

    @property
    def constant_history(self) -> bool:
        return not callable(self.history)

    def history_at(self, t) -> np.ndarray:
        if callable(self.history):
            return np.asarray(self.history(t), dtype=float).reshape(self.n_x)
        return np.asarray(self.history, dtype=float).reshape(self.n_x)

    @property
    def x0(self) -> np.ndarray:
        return self.history_at(self.t_span[0])

    def names(self) -> list:
        if self.state_names:
            return list(self.state_names)
        return [f"x{i}" for i in range(self.n_x)]


@dataclass(frozen=True)
class LctSystem:
    """Block matrices of the chain realization, one block per memory channel."""

    mixtures: tuple
    A: object
    B: object
    C: object
    starts: np.ndarray
    rates: np.ndarray  # rate of the owning channel for every auxiliary state
    coeffs: np.ndarray  # concatenated coefficient vectors

    @property
    def n_z(self) -> int:
        return len(self.mixtures)

    @property
    def dim(self) -> int:
        return self.rates.size

    @property
    def sizes(self) -> list:
        return [m.order + 1 for m in self.mixtures]

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.A)

    def memory(self, Z) -> np.ndarray:
        """``z = C Z``."""
        return np.add.reduceat(self.coeffs * Z, self.starts)

    def chain_rhs(self, Z, r) -> np.ndarray:
        """``A Z + B r`` without forming the matrices."""
        prev = np.empty_like(Z)
        prev[1:] = Z[:-1]
        prev[self.starts] = r
        return self.rates * (prev - Z)

    def solve_A(self, v) -> np.ndarray:
        """``A^{-1} v`` by forward substitution on each bidiagonal block."""
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        bounds = list(self.starts) + [self.dim]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            out[lo:hi] = -np.cumsum(v[lo:hi], axis=0) / self.rates[lo]
        return out


def build_lct(mixtures: Sequence[ErlangMixture], sparse_threshold: int = SPARSE_THRESHOLD) -> LctSystem:
    """Assemble ``A``, ``B``, ``C`` for one mixture per memory channel."""
    mixtures = tuple(mixtures)
    if not mixtures:
        raise ValueError("need at least one memory channel")
    sizes = [m.order + 1 for m in mixtures]
    dim = sum(sizes)
    n_z = len(mixtures)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    rates = np.concatenate([np.full(s, m.rate) for s, m in zip(sizes, mixtures)])
    coeffs = np.concatenate([m.coefficients for m in mixtures])

    diag = -rates
    sub = rates[1:].copy()
    sub[starts[1:] - 1] = 0.0  # no coupling across channel boundaries
    A = sparse.diags([diag, sub], [0, -1], shape=(dim, dim), format="csr")
    B = sparse.csr_matrix((rates[starts], (starts, np.arange(n_z))), shape=(dim, n_z))
    rows = np.repeat(np.arange(n_z), sizes)
    C = sparse.csr_matrix((coeffs, (rows, np.arange(dim))), shape=(n_z, dim))
    if dim + n_z <= sparse_threshold:
        A, B, C = A.toarray(), B.toarray(), C.toarray()
    return LctSystem(mixtures, A, B, C, starts, rates, coeffs)


def augmented_rhs(model: ModelSpec, lct: LctSystem, x, Z, t: float = 0.0):
    """Right-hand side ``(x', Z')`` of the chain system."""
    z = lct.memory(Z)
    xdot = np.asarray(model.f(t, x, z), dtype=float)
    r = np.asarray(model.h(x), dtype=float)
    if not (np.all(np.isfinite(xdot)) and np.all(np.isfinite(r))):
        raise FloatingPointError(f"non-finite model output at t={t}")
    return xdot, lct.chain_rhs(Z, r)


def _gauss_legendre_nodes(upper, panels=200, order=16):
    g, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, upper, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    s = (mid[:, None] + half[:, None] * g[None, :]).ravel()
    ws = (half[:, None] * w[None, :]).ravel()
    return s, ws


def initial_memory(model: ModelSpec, lct: LctSystem, t0: Optional[float] = None) -> np.ndarray:
    """Initial auxiliary states for the model history.

    For a constant history every state of channel ``i`` equals ``h_i(x0)``.
    A callable history is convolved with each Erlang kernel by composite
    Gauss-Legendre quadrature over the kernel's effective support.
    """
    t0 = model.t_span[0] if t0 is None else t0
    if model.constant_history:
        r0 = np.asarray(model.h(model.x0), dtype=float)
        return np.repeat(r0, lct.sizes)
    Z0 = np.empty(lct.dim)
    for i, (mix, lo) in enumerate(zip(lct.mixtures, lct.starts)):
        m1 = mix.order + 1
        upper = (m1 + 14.0 * math.sqrt(m1) + 40.0) / mix.rate
        s, w = _gauss_legendre_nodes(upper)
        r = np.array([np.asarray(model.h(model.history_at(t0 - si)), float)[i] for si in s])
        Z0[lo:lo + m1] = erlang_table(mix.order, mix.rate, s) @ (w * r)
    return Z0


def steady_memory(lct: LctSystem, r_bar) -> np.ndarray:
    """Auxiliary states in steady state: every state equals its channel's input."""
    return np.repeat(np.asarray(r_bar, dtype=float), lct.sizes)


def steady_state(model: ModelSpec, guess, t: float = 0.0, max_iter: int = 100,
                 tol: float = 1e-12) -> np.ndarray:
    """Solve ``f(x, h(x)) = 0`` by damped Newton with Armijo backtracking."""
    x = np.array(guess, dtype=float).reshape(model.n_x)
    trace = []

    def g(x):
        return np.asarray(model.f(t, x, model.h(x)), dtype=float)

    gx = g(x)
    for it in range(max_iter):
        nrm = float(np.linalg.norm(gx))
        trace.append((it, x.copy(), nrm))
        if nrm <= tol * (1.0 + np.linalg.norm(x)):
            return x
        z = np.asarray(model.h(x), float)
        J = model.jac_x(t, x, z) + model.jac_z(t, x, z) @ model.jac_h(x)
        try:
            dx = np.linalg.solve(J, -gx)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -gx, rcond=None)[0]
        lam = 1.0
        while lam > 1e-10:
            x_new = x + lam * dx
            g_new = g(x_new)
            if np.all(np.isfinite(g_new)) and np.linalg.norm(g_new) <= (1 - 1e-4 * lam) * nrm:
                break
            lam *= 0.5
        else:
            x_new = x + dx
            g_new = g(x_new)
        x, gx = x_new, g_new
    raise SteadyStateError(f"steady state Newton did not converge in {max_iter} iterations", trace)


def augmented_jacobian(model: ModelSpec, lct: LctSystem, x, Z, t: float = 0.0, as_sparse=None):
    """Jacobian ``[[F, G C], [B H, A]]`` of the chain system at ``(x, Z)``."""
    x = np.asarray(x, dtype=float)
    z = lct.memory(np.asarray(Z, dtype=float))
    F = np.atleast_2d(model.jac_x(t, x, z))
    G = np.atleast_2d(model.jac_z(t, x, z))
    H = np.atleast_2d(model.jac_h(x))
    use_sparse = lct.is_sparse if as_sparse is None else as_sparse
    if use_sparse:
        C = sparse.csr_matrix(lct.C)
        B = sparse.csr_matrix(lct.B)
        A = sparse.csr_matrix(lct.A)
        return sparse.bmat([[sparse.csr_matrix(F), sparse.csr_matrix(G) @ C],
                            [B @ sparse.csr_matrix(H), A]], format="csc")
    C = lct.C.toarray() if sparse.issparse(lct.C) else lct.C
    B = lct.B.toarray() if sparse.issparse(lct.B) else lct.B
    A = lct.A.toarray() if sparse.issparse(lct.A) else lct.A
    return np.block([[F, G @ C], [B @ H, A]])


class LctOde:
    """Callable right-hand side and Jacobian of the chain system on ``y = [x; Z]``."""

    def __init__(self, model: ModelSpec, lct: LctSystem):
        self.model = model
        self.lct = lct
        self.n_x = model.n_x

    def initial_state(self) -> np.ndarray:
        return np.concatenate([self.model.x0, initial_memory(self.model, self.lct)])

    def split(self, y):
        return y[:self.n_x], y[self.n_x:]

    def __call__(self, t, y):
        x, Z = self.split(y)
        xdot, Zdot = augmented_rhs(self.model, self.lct, x, Z, t)
        return np.concatenate([xdot, Zdot])

    def jacobian(self, t, y):
        x, Z = self.split(y)
        return augmented_jacobian(self.model, self.lct, x, Z, t)

    def memory(self, y):
        return self.lct.memory(y[self.n_x:])
