import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from erlangdelay.approx import (FitProblem, HorizonError, beta, find_horizon, fit_least_squares,
                                fit_theoretical, kernel_error, objective, project_simplex,
                                simplex_lstsq, tail_mass)
from erlangdelay.kernels import ErlangMixture, KernelSpec, make_kernel


@pytest.fixture(scope="module")
def gauss():
    return make_kernel("gaussian-halfline")


def test_exponential_horizon_closed_form():
    k = make_kernel("exponential", rate=2.0)
    res = find_horizon(k, 1e-10)
    assert res.t_h == pytest.approx(-math.log(1e-10) / 2.0, rel=1e-8)
    assert res.residual <= 1e-11


def test_horizon_bracket_repair(gauss):
    good = find_horizon(gauss, 1e-14)
    # both ends below the root, then both above
    assert find_horizon(gauss, 1e-14, bracket=(0.1, 0.2)).t_h == pytest.approx(good.t_h, rel=1e-9)
    assert find_horizon(gauss, 1e-14, bracket=(50, 60)).t_h == pytest.approx(good.t_h, rel=1e-9)
    assert tail_mass(gauss, good.t_h) == pytest.approx(1e-14, rel=0.1)


def test_horizon_without_analytic_cdf_uses_quadrature():
    k = make_kernel("custom", density=lambda t: np.exp(-np.asarray(t)), support=10.0)
    assert find_horizon(k, 1e-8).t_h == pytest.approx(-math.log(1e-8), rel=1e-6)
    assert beta(k, 1.0) == pytest.approx(1 - math.exp(-1), rel=1e-12)


def test_horizon_errors():
    k = KernelSpec("flat", lambda t: np.zeros_like(np.asarray(t, float)), 1.0, 1.0,
                   cdf=lambda t: 0.0 * np.asarray(t, float), sf=lambda t: 1.0 + 0.0 * np.asarray(t, float))
    with pytest.raises(HorizonError):
        find_horizon(k, 1e-6)
    with pytest.raises(ValueError):
        find_horizon(make_kernel("exponential"), 1.5)


def fd_grad_hess(problem, c, a, h=1e-6):
    x = np.concatenate([c, [a]])
    n = x.size

    def f(v):
        return objective(problem, v[:-1], v[-1], derivatives=False)

    def g(v):
        return objective(problem, v[:-1], v[-1])[1]

    grad = np.empty(n)
    hess = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h * max(1.0, abs(x[i]))
        grad[i] = (f(x + e) - f(x - e)) / (2 * e[i])
        hess[:, i] = (g(x + e) - g(x - e)) / (2 * e[i])
    return grad, hess


def test_objective_derivatives_match_finite_differences(gauss):
    rng = np.random.default_rng(3)
    problem = FitProblem(gauss, 6, 5.5, samples=60)
    for _ in range(5):
        c = rng.dirichlet(np.ones(7))
        a = rng.uniform(0.5, 6.0)
        _, g, H = objective(problem, c, a)
        gf, Hf = fd_grad_hess(problem, c, a)
        assert np.allclose(g, gf, rtol=1e-6, atol=1e-9 * np.abs(g).max())
        assert np.allclose(H, Hf, rtol=1e-6, atol=1e-7 * np.abs(H).max())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_project_simplex_properties(v):
    v = np.array(v)
    p = project_simplex(v)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(project_simplex(p), p, atol=1e-12)
    # no other simplex point is closer: check against random simplex points
    rng = np.random.default_rng(0)
    others = rng.dirichlet(np.ones(v.size), size=50)
    assert np.all(np.linalg.norm(others - v, axis=1) >= np.linalg.norm(p - v) - 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_simplex_lstsq_matches_generic_solver(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3 * n, n))
    b = rng.normal(size=3 * n)
    x, dual = simplex_lstsq(A, b)
    assert np.all(x >= 0) and x.sum() == pytest.approx(1.0, abs=1e-12)
    assert dual <= 1e-10
    ref = minimize(lambda y: 0.5 * np.sum((A @ y - b) ** 2), np.full(n, 1 / n),
                   jac=lambda y: A.T @ (A @ y - b), method="SLSQP",
                   bounds=[(0, None)] * n, constraints=[{"type": "eq", "fun": lambda y: y.sum() - 1}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    ours = 0.5 * np.sum((A @ x - b) ** 2)
    assert ours <= ref.fun + 1e-10 * max(1.0, ref.fun)


def test_theoretical_coefficients_are_interval_masses(gauss):
    t_h = find_horizon(gauss, 1e-14).t_h
    res = fit_theoretical(gauss, 9, t_h)
    a = res.mixture.rate
    assert a == pytest.approx(10 / t_h)
    c = res.mixture.coefficients
    assert c.sum() == pytest.approx(1.0 - 1e-14, abs=1e-13)
    assert c[2] == pytest.approx(beta(gauss, 3 / a) - beta(gauss, 2 / a), rel=1e-13)


def test_theoretical_fit_by_quadrature_matches_analytic_cdf(gauss):
    numeric = make_kernel("custom", density=lambda t: 2 / math.sqrt(math.pi) * np.exp(-np.asarray(t) ** 2),
                          support=7.0)
    a1 = fit_theoretical(gauss, 6, 5.0, error_points=0).mixture.coefficients
    a2 = fit_theoretical(numeric, 6, 5.0, error_points=0).mixture.coefficients
    assert np.allclose(a1, a2, atol=1e-11)


def test_least_squares_fit_improves_on_start_and_satisfies_kkt(gauss):
    t_h = find_horizon(gauss, 1e-14).t_h
    problem = FitProblem(gauss, 8, t_h, samples=100)
    th = fit_theoretical(gauss, 8, t_h, samples=100)
    ls = fit_least_squares(problem)
    assert ls.converged
    assert ls.objective < th.objective
    assert ls.kkt_residual <= 1e-8
    assert ls.mixture.coefficients.sum() == pytest.approx(1.0, abs=1e-12)
    # optimality in the rate: small perturbations do not decrease the objective
    phi = objective(problem, ls.mixture.coefficients, ls.mixture.rate, derivatives=False)
    for f in (0.999, 1.001):
        c, _ = simplex_lstsq(
            (np.sqrt(problem.step) * __import__("erlangdelay").kernels.erlang_table(8, ls.mixture.rate * f,
                                                                                     problem.grid)).T,
            np.sqrt(problem.step) * problem.target)
        assert objective(problem, c, ls.mixture.rate * f, derivatives=False) >= phi * (1 - 1e-9)


def test_least_squares_recovers_an_exact_mixture():
    truth = ErlangMixture(3.0, [0.1, 0.0, 0.6, 0.3])
    k = make_kernel("erlang-mixture", rate=3.0, coefficients=truth.coefficients)
    t_h = find_horizon(k, 1e-14).t_h
    res = fit_least_squares(FitProblem(k, 3, t_h, samples=80), tol=1e-12)
    assert res.mixture.rate == pytest.approx(3.0, rel=1e-6)
    assert np.allclose(res.mixture.coefficients, truth.coefficients, atol=1e-6)
    assert res.objective < 1e-20


def test_kernel_error_zero_for_identical_and_positive_otherwise():
    mix = ErlangMixture(2.0, [0.5, 0.5])
    k = make_kernel("erlang-mixture", rate=2.0, coefficients=[0.5, 0.5])
    assert kernel_error(mix, k, 1000, 10.0) == 0.0
    assert kernel_error(ErlangMixture(2.0, [1.0, 0.0]), k, 1000, 10.0) > 0


def test_fit_problem_defaults(gauss):
    p = FitProblem(gauss, 5, 4.0)
    assert p.samples == 24
    assert p.a_min == pytest.approx(2.5e-7)
    assert p.grid[0] == 0.0 and p.grid[-1] == pytest.approx(4.0 - 4.0 / 24)
    with pytest.raises(ValueError):
        FitProblem(gauss, 5, 4.0, samples=3)
