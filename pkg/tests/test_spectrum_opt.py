import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_cov
from transferrisk.asymptotics import averaged_objective, solve_b0, variance_factor, whiten
from transferrisk.model import CovarianceModel, stream
from transferrisk.spectrum_opt import (
    HardRegime,
    Selection,
    alignment_coefficients,
    bias_avg_x,
    bias_worst_x,
    compute_h0,
    direct_objective,
    from_x_space,
    hard_selection_weights,
    is_feasible,
    minimize_bias_spectrum,
    minimize_variance_spectrum,
    problem_from_arrays,
    project_feasible,
    relaxed_objective,
    solve_direct,
    solve_relaxed,
    spectrum_penalty,
    to_x_space,
    variance_x,
)

WORKED = dict(eta=[1.0, 1.0, 1.0], phi=[10.0, 1.0, 0.1], n=1, q=1)


def _worked():
    return problem_from_arrays(**WORKED)


def test_alignment_zero_prior():
    cov = CovarianceModel.from_matrix(random_cov(stream(0, 1), 6))
    prob = alignment_coefficients(cov, stream(0, 2).standard_normal((6, 2)), np.zeros((2, 2)), 3)
    assert np.all(prob.theta == 0) and prob.h1 == 0


def test_alignment_orthonormal_truth():
    cov = CovarianceModel.from_matrix(random_cov(stream(1, 1), 6))
    prob = alignment_coefficients(cov, np.eye(6), np.eye(6), 3)
    np.testing.assert_allclose(prob.theta, 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sort(prob.phi), np.sort(cov.eigvals), rtol=1e-12)
    assert prob.h1 == 6


def test_alignment_trace_identity():
    rng = stream(2, 1)
    cov = CovarianceModel.from_matrix(random_cov(rng, 9))
    B = rng.standard_normal((9, 4))
    prior = np.diag([1.0, 2.0, 0.5, 1.5])
    prob = alignment_coefficients(cov, B, prior, 3)
    assert prob.phi.sum() == pytest.approx(np.trace(cov.sigma @ B @ prior @ B.T), rel=1e-10)
    assert np.all(np.diff(prob.phi) <= 0)


def test_h0_hand_cases():
    assert compute_h0(np.array([4.0, 2.0, 1.0]), 2) == 3
    assert compute_h0(np.array([10.0, 1.0, 0.1]), 1) == 2
    for n in range(1, 7):
        assert compute_h0(np.full(7, 3.0), n) == 7


def test_h0_undefined_in_hard_regime():
    with pytest.raises(HardRegime):
        compute_h0(np.array([3.0, 1.0, 0.0, 0.0]), 2)


def _h0_exhaustive(phi, n):
    h1 = int(np.sum(phi > 0))
    best = None
    for m in range(n + 1, h1 + 1):
        if phi[m - 1] * np.sum(1 / phi[:m]) >= m - n:
            best = m
    return best


@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=30), st.data())
def test_h0_matches_exhaustive_search(phi, data):
    phi = np.sort(np.array(phi))[::-1]
    n = data.draw(st.integers(1, phi.size - 1))
    assert compute_h0(phi, n) == _h0_exhaustive(phi, n)


def test_variance_minimizer_closed_form():
    sol = minimize_variance_spectrum(np.ones(10), 5)
    assert sol.value == pytest.approx(1.0)
    assert is_feasible(sol.x, 5)


@pytest.mark.parametrize("c", [0.1, 1.0, 7.0])
def test_variance_minimizer_through_pipeline(c):
    cov = CovarianceModel.from_matrix(random_cov(stream(3, 1), 20, jitter=0.2))
    n = 6
    prob = alignment_coefficients(cov, np.eye(20), np.eye(20), n)
    sol = minimize_variance_spectrum(prob.eta, n, c=c)
    spec = whiten(cov, spectrum_penalty(prob, sol.r_hat))
    V = variance_factor(spec.t, solve_b0(spec, n))
    assert V == pytest.approx(1 / (20 / n - 1), abs=1e-10)


def test_random_penalties_never_beat_variance_minimizer():
    from transferrisk.penalty import Penalty

    rng = stream(4, 1)
    cov = CovarianceModel.from_matrix(random_cov(rng, 8))
    n = 3
    best = 1 / (8 / n - 1)
    for _ in range(1000):
        Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        pen = Penalty(r=np.exp(rng.uniform(-2, 2, 8)), basis=Q)
        spec = whiten(cov, pen)
        assert variance_factor(spec.t, solve_b0(spec, n)) >= best - 1e-10


def test_worked_soft_optimum():
    prob = _worked()
    sol = minimize_bias_spectrum(prob, c=1.0)
    assert sol.selection == Selection.SOFT and sol.h0 == 2
    assert sol.value == pytest.approx(0.1 + 1 / 1.1, abs=1e-9)
    assert sol.value == pytest.approx(1.009091, abs=1e-6)
    np.testing.assert_allclose(sol.x, [1 / 11, 10 / 11, 1.0], atol=1e-12)
    np.testing.assert_allclose(sol.r_hat[:2], [0.1, 10.0], rtol=1e-12)
    assert np.isinf(sol.r_hat[2])
    assert bias_avg_x(sol.x, prob) == pytest.approx(sol.value, rel=1e-12)


def test_worked_optimum_beats_random_feasible_points():
    prob = _worked()
    best = minimize_bias_spectrum(prob).value
    rng = stream(5, 1)
    for _ in range(10000):
        x = project_feasible(rng.uniform(-0.5, 1.5, 3), 1)
        assert bias_avg_x(x, prob) >= best - 1e-12


def test_worked_optimum_beats_grid():
    prob = _worked()
    best = minimize_bias_spectrum(prob).value
    g = np.arange(0, 1 + 1e-12, 0.005)
    for a, b in itertools.product(g, g):
        c = 2 - a - b
        if 0 <= c <= 1:
            assert bias_avg_x(np.array([a, b, c]), prob) >= best - 1e-12


def test_hard_regime_bias_vanishes_along_path():
    eta = np.array([3.0, 2.0, 1.5, 1.0, 0.5])
    phi = np.array([4.0, 1.0, 0.0, 0.0, 0.0])
    prob = problem_from_arrays(eta, phi, n=3)
    assert prob.selection == Selection.HARD
    assert minimize_bias_spectrum(prob).value == 0.0
    cov = CovarianceModel.from_matrix(np.diag(eta))
    B = np.zeros((5, 1))
    B[:2, 0] = np.sqrt(phi[:2] / eta[:2])
    biases = []
    for rho in [1e-2, 1e-4, 1e-6, 1e-8]:
        pen = spectrum_penalty(prob, hard_selection_weights(prob, rho))
        biases.append(averaged_objective(whiten(cov, pen), B, np.eye(1), 1.0, 3).bias)
    assert biases[-1] <= 1e-8
    assert all(a >= b for a, b in zip(biases, biases[1:]))


def test_x_space_round_trip_and_half_point():
    eta = np.array([2.0, 1.0, 0.5, 0.25])
    x = to_x_space(3.0 * eta, eta, c=3.0)
    np.testing.assert_allclose(x, 0.5)
    assert is_feasible(x, 2) and not is_feasible(x, 1)
    r = np.array([0.3, 1.7, 4.0, 9.0])
    np.testing.assert_allclose(from_x_space(to_x_space(r, eta, 2.0), eta, 2.0), r, rtol=1e-12)
    assert np.isinf(from_x_space(np.array([1.0]), np.array([1.0]))[0])


def test_worked_soft_solution_in_x_space():
    prob = _worked()
    sol = minimize_bias_spectrum(prob)
    np.testing.assert_allclose(to_x_space(sol.r_hat, prob.eta), sol.x, atol=1e-12)


def test_projection_basic_cases():
    x = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(project_feasible(x, 2), x, atol=1e-14)
    np.testing.assert_allclose(project_feasible(np.zeros(2), 1), [0.5, 0.5])


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=12), st.data())
def test_projection_variational_inequality(y, data):
    y = np.array(y)
    n = data.draw(st.integers(0, y.size))
    x = project_feasible(y, n)
    assert is_feasible(x, n, atol=1e-9)
    rng = stream(len(y), n)
    for _ in range(50):
        z = project_feasible(rng.uniform(-1, 2, y.size), n)
        assert (y - x) @ (z - x) <= 1e-10


def _grid_best(prob, fn, step=0.005):
    g = np.arange(0, 1 + 1e-12, step)
    target = prob.h - prob.n
    best = np.inf
    for a, b in itertools.product(g, g):
        c = target - a - b
        if 0 <= c <= 1:
            best = min(best, fn(np.array([a, b, c]), prob))
    return best


def _h3_problem():
    return problem_from_arrays([2.0, 1.0, 0.5], [3.0, 1.0, 0.2], n=1, q=1, noise_var=0.5)


def test_relaxed_solver_matches_grid():
    prob = _h3_problem()
    sol = solve_relaxed(prob)
    grid = _grid_best(prob, relaxed_objective)
    assert sol.value <= grid + 1e-9
    assert sol.value >= grid - 1e-3  # grid resolution


def test_direct_solver_matches_grid():
    prob = _h3_problem()
    sol = solve_direct(prob)
    assert sol.value <= _grid_best(prob, direct_objective) + 1e-9


def test_direct_below_relaxed():
    prob = _h3_problem()
    assert solve_direct(prob).value <= solve_relaxed(prob).value + 1e-12


def test_noise_dominated_solution_is_variance_minimizer():
    eta = np.array([2.0, 1.0, 0.5, 0.3])
    prob = problem_from_arrays(eta, [1.0, 0.5, 0.2, 0.1], n=2, noise_var=1e8)
    sol = solve_relaxed(prob)
    np.testing.assert_allclose(sol.x, 1 - 2 / 4, atol=1e-3)


def test_zero_alignment_reduces_to_variance():
    prob = problem_from_arrays([2.0, 1.0, 0.5, 0.3], np.zeros(4), n=1)
    sol = solve_direct(prob)
    np.testing.assert_allclose(sol.x, 0.75, atol=1e-6)
    assert sol.value == pytest.approx(1 / (4 - 1), rel=1e-6)


def test_zero_radius_worst_case_is_variance_problem():
    prob = problem_from_arrays([2.0, 1.0, 0.5, 0.3], [1.0, 0.5, 0.2, 0.1], n=1)
    from dataclasses import replace

    prob = replace(prob, radius2=0.0)
    assert bias_worst_x(np.full(4, 0.75), prob) == 0.0
    np.testing.assert_allclose(solve_relaxed(prob, "worst").x, 0.75, atol=1e-6)


def _midpoint_gap(f, x, y):
    return f(0.5 * (x + y)) - 0.5 * (f(x) + f(y))


def test_convexity_certificates():
    rng = stream(6, 1)
    eta = np.sort(rng.uniform(0.2, 2, 6))[::-1]
    F = rng.standard_normal((6, 2))
    from transferrisk.spectrum_opt import SpectrumProblem

    phi = eta * np.sum(F**2, axis=1)
    prob = SpectrumProblem(eta, phi / eta, phi, np.arange(6), np.eye(6), F, n=2, q=2)
    worst = 0.0
    for _ in range(2000):
        x = project_feasible(rng.uniform(0, 1, 6), 2)
        y = project_feasible(rng.uniform(0, 1, 6), 2)
        for f in (lambda v: variance_x(v, 2), lambda v: bias_avg_x(v, prob), lambda v: bias_worst_x(v, prob)):
            worst = max(worst, _midpoint_gap(f, x, y))
    assert worst <= 1e-12


def test_variance_infinite_outside_domain():
    assert variance_x(np.ones(3), 1) == np.inf
