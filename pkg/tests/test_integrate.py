import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from erlangdelay.integrate import (IntegrationError, IntegratorConfig, MaxStepsError, NewtonError,
                                   StiffnessError, Trajectory, hermite, solve, solve_explicit,
                                   solve_implicit)


def decay(t, y):
    return -y


def decay_jac(t, y):
    return -np.eye(y.size)


def oscillator(t, y):
    return np.array([y[1], -y[0]])


def oscillator_jac(t, y):
    return np.array([[0.0, 1.0], [-1.0, 0.0]])


def test_adaptive_explicit_meets_tolerance():
    traj = solve_explicit(oscillator, [1.0, 0.0], 0.0, 10.0, IntegratorConfig(atol=1e-10, rtol=1e-10))
    assert traj.times[-1] == 10.0
    assert np.allclose(traj.final, [math.cos(10), -math.sin(10)], atol=1e-8)
    assert traj.n_fev > traj.n_steps


@pytest.mark.parametrize("scheme", ["trbdf2", "euler"])
def test_adaptive_implicit_meets_tolerance(scheme):
    cfg = IntegratorConfig(atol=1e-9, rtol=1e-9, method="implicit", scheme=scheme)
    traj = solve(oscillator, [1.0, 0.0], 0.0, 3.0, cfg, jacobian=oscillator_jac)
    tol = 1e-6 if scheme == "trbdf2" else 1e-4
    assert np.allclose(traj.final, [math.cos(3), -math.sin(3)], atol=tol)
    assert traj.n_lu >= 1 and traj.n_jev >= 1


def fixed_error(method, scheme, h):
    cfg = IntegratorConfig(method=method, scheme=scheme, fixed_step=h)
    traj = solve(oscillator, [1.0, 0.0], 0.0, 2.0, cfg, jacobian=oscillator_jac)
    return float(np.linalg.norm(traj.final - [math.cos(2.0), -math.sin(2.0)]))


@pytest.mark.parametrize("method,scheme,order", [("explicit-rk", "trbdf2", 5), ("implicit", "trbdf2", 2),
                                                 ("implicit", "euler", 1)])
def test_fixed_step_convergence_order(method, scheme, order):
    h = 0.1 if order == 5 else 0.02
    e1, e2 = fixed_error(method, scheme, h), fixed_error(method, scheme, h / 2)
    assert math.log2(e1 / e2) == pytest.approx(order, abs=0.3)


def test_stiff_problem_needs_few_implicit_steps():
    lam = 1e6

    def rhs(t, y):
        return np.array([-lam * (y[0] - math.cos(t))])

    def jac(t, y):
        return np.array([[-lam]])

    cfg = IntegratorConfig(atol=1e-8, rtol=1e-8, method="implicit")
    traj = solve(rhs, [0.0], 0.0, 1.0, cfg, jacobian=jac)
    assert traj.final[0] == pytest.approx(math.cos(1.0) + math.sin(1.0) / lam, abs=1e-7)
    assert traj.n_steps < 2000


def test_sparse_jacobian_gives_same_answer_as_dense():
    A = sparse.diags([-np.arange(1.0, 301.0)], [0], format="csc")

    def rhs(t, y):
        return A @ y

    y0 = np.ones(300)
    cfg = IntegratorConfig(atol=1e-10, rtol=1e-10, method="implicit")
    s = solve(rhs, y0, 0.0, 0.5, cfg, jacobian=lambda t, y: A)
    d = solve(rhs, y0, 0.0, 0.5, cfg, jacobian=lambda t, y: A.toarray())
    assert np.allclose(s.final, d.final, rtol=1e-12, atol=1e-14)
    # local tolerance 1e-10 over a few thousand steps
    assert np.abs(s.final - np.exp(-0.5 * np.arange(1.0, 301.0))).max() <= 1e-6


def test_t_eval_uses_dense_output():
    ts = np.linspace(0.0, 5.0, 37)
    traj = solve_explicit(decay, [1.0], 0.0, 5.0, IntegratorConfig(atol=1e-11, rtol=1e-11), t_eval=ts)
    assert np.array_equal(traj.times, ts)
    assert np.allclose(traj.states[:, 0], np.exp(-ts), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.01, 2.0))
def test_hermite_is_exact_for_cubics(coef, h):
    p = np.polynomial.Polynomial(coef)
    times = np.array([0.0, h, 2.5 * h])
    states = p(times)[:, None]
    derivs = p.deriv()(times)[:, None]
    t = np.linspace(0.0, 2.5 * h, 13)
    assert np.allclose(hermite(t, times, states, derivs)[:, 0], p(t), atol=1e-9 * max(1, np.abs(coef).max()))


def test_hermite_rejects_extrapolation():
    with pytest.raises(ValueError):
        hermite([2.0], np.array([0.0, 1.0]), np.zeros((2, 1)), np.zeros((2, 1)))


def test_trajectory_validation_and_linear_fallback():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [[1.0], [2.0]])
    tr = Trajectory([0.0, 1.0], [[0.0], [2.0]])
    assert tr.interpolate([0.25])[0, 0] == pytest.approx(0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(atol=1e-16)
    with pytest.raises(ValueError):
        IntegratorConfig(method="rk4")
    with pytest.raises(ValueError):
        IntegratorConfig(scheme="bdf5")
    with pytest.raises(ValueError):
        solve(decay, [1.0], 0.0, 1.0, IntegratorConfig(method="implicit"))


def test_failures_are_reported_with_time():
    with pytest.raises(MaxStepsError):
        solve_explicit(decay, [1.0], 0.0, 100.0, IntegratorConfig(max_steps=5))
    with pytest.raises(IntegrationError) as info:
        solve_explicit(lambda t, y: y / (1.0 - t), [1.0], 0.0, 2.0, IntegratorConfig())
    assert info.value.t is not None and info.value.t < 1.0 + 1e-6
    with pytest.raises(IntegrationError):
        solve_explicit(decay, [np.nan], 0.0, 1.0)
    # blow-up in finite time: the explicit solver shrinks the step below the minimum
    with pytest.raises((StiffnessError, IntegrationError)):
        solve_explicit(lambda t, y: y * y, [1.0], 0.0, 2.0, IntegratorConfig(min_step=1e-10))


def test_newton_failure_at_fixed_step():
    with pytest.raises(NewtonError):
        solve_implicit(lambda t, y: -(y ** 3) * 1e4, lambda t, y: np.zeros((1, 1)), [10.0], 0.0, 1.0,
                       IntegratorConfig(method="implicit", fixed_step=0.5))
