import math

import numpy as np
import pytest

from brw._ode import StepControlError, integrate_affine
from brw.feynman_kac import (ParabolicProblem, solve_direct, solve_fk_mc,
                             transition_matrix)
from brw.kernel import KernelSpec, TorusGrid

KERN = KernelSpec.simple_random_walk(1, kappa=0.25)
GRID = TorusGrid((16,))
S = 16


def random_problem(rng, scale=None):
    return ParabolicProblem(
        kernel=KERN, grid=GRID,
        potential=rng.uniform(0.5, 2.0, S),
        source=rng.uniform(0.0, 2.0, S),
        u0=rng.uniform(0.0, 3.0, S),
        generator_scale=scale)


def test_transition_matrix_identity_at_zero():
    assert np.max(np.abs(transition_matrix(KERN, GRID, 0.0) - np.eye(S))) < 1e-14


def test_transition_matrix_stochastic_and_symmetric():
    P = transition_matrix(KERN, GRID, 1.3)
    assert np.max(np.abs(P.sum(axis=1) - 1.0)) < 1e-10
    assert np.max(np.abs(P - P.T)) < 1e-12
    assert np.all(P >= -1e-12)


def test_transition_matrix_small_time_expansion():
    t = 1e-3
    P = transition_matrix(KERN, GRID, t)
    # p(t, x, x+-1) = (kappa/2) t + O(t^2)
    assert abs(P[0, 1] - 0.25 / 2 * t) < 1e-5
    assert abs(P[0, -1] - 0.25 / 2 * t) < 1e-5


def test_solve_direct_constant_is_invariant():
    prob = ParabolicProblem(KERN, GRID, np.zeros(S), None, np.full(S, 2.5))
    u = solve_direct(prob, 4.0)
    assert np.max(np.abs(u - 2.5)) < 1e-10


def test_solve_direct_scalar_closed_form():
    v0, k0, u0 = 1.3, 0.8, 2.0
    prob = ParabolicProblem(KERN, GRID, np.full(S, v0), np.full(S, k0),
                            np.full(S, u0))
    for t in (0.5, 2.0):
        want = k0 / v0 + (u0 - k0 / v0) * math.exp(-v0 * t)
        assert np.max(np.abs(solve_direct(prob, t) - want)) < 1e-9


def test_solve_direct_matches_transition_semigroup():
    rng = np.random.default_rng(5)
    u0 = rng.uniform(0, 1, S)
    prob = ParabolicProblem(KERN, GRID, np.zeros(S), None, u0)
    u = solve_direct(prob, 3.0)
    want = transition_matrix(KERN, GRID, 3.0) @ u0
    assert np.max(np.abs(u - want)) < 1e-8


def test_solve_direct_time_additivity():
    rng = np.random.default_rng(6)
    prob = ParabolicProblem(KERN, GRID, rng.uniform(0, 2, S), None,
                            rng.uniform(0, 2, S))
    u1 = solve_direct(prob, 1.5, tol=1e-10)
    prob2 = ParabolicProblem(KERN, GRID, prob.potential, None, u1)
    u12 = solve_direct(prob2, 2.5, tol=1e-10)
    direct = solve_direct(prob, 4.0, tol=1e-10)
    assert np.max(np.abs(u12 - direct)) < 1e-8


def test_fk_mc_constant_data_zero_variance():
    prob = ParabolicProblem(KERN, GRID, np.zeros(S), None, np.full(S, 1.7))
    est = solve_fk_mc(prob, 2.0, 4, 200, seed=1)
    assert est.mean == pytest.approx(1.7, abs=1e-14)
    assert est.se < 1e-12  # every path returns the identical value


def test_fk_mc_scalar_case():
    v0, k0, u0 = 1.0, 1.0, 3.0
    prob = ParabolicProblem(KERN, GRID, np.full(S, v0), np.full(S, k0),
                            np.full(S, u0), generator_scale=1.0)
    t = 2.0
    want = k0 / v0 + (u0 - k0 / v0) * math.exp(-v0 * t)
    est = solve_fk_mc(prob, t, 0, 4000, seed=2)
    # constant data makes the path functional deterministic; allow rounding
    assert abs(est.mean - want) <= 3 * est.se + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_fk_mc_agrees_with_direct(seed):
    rng = np.random.default_rng(100 + seed)
    prob = random_problem(rng)
    x = int(rng.integers(S))
    direct = solve_direct(prob, 5.0)
    est = solve_fk_mc(prob, 5.0, x, 3000, seed=seed)
    assert abs(est.mean - direct[x]) <= 3 * est.se


def test_fk_mc_time_dependent_source():
    # f(t, x) = e^{-t} per site; quadrature path vs direct solver
    decay = lambda t: np.full(S, math.exp(-t))
    prob = ParabolicProblem(KERN, GRID, np.full(S, 0.8), decay, np.ones(S))
    direct = solve_direct(prob, 3.0)
    est = solve_fk_mc(prob, 3.0, 5, 3000, seed=11)
    assert abs(est.mean - direct[5]) <= 3 * est.se + 1e-10


def test_monotone_in_potential():
    rng = np.random.default_rng(9)
    base = random_problem(rng)
    bigger = ParabolicProblem(KERN, GRID, base.potential + rng.uniform(0.1, 1.0, S),
                              base.source, base.u0)
    u_small = solve_direct(base, 4.0)
    u_big = solve_direct(bigger, 4.0)
    assert np.all(u_big <= u_small + 1e-12)
    est_small = solve_fk_mc(base, 4.0, 3, 2000, seed=3)
    est_big = solve_fk_mc(bigger, 4.0, 3, 2000, seed=3)
    assert est_big.mean <= est_small.mean + 3 * (est_big.se + est_small.se)


def test_path_estimate_se_definition():
    rng = np.random.default_rng(12)
    prob = random_problem(rng)
    est = solve_fk_mc(prob, 1.0, 0, 500, seed=5)
    assert est.n_paths == 500
    assert est.se >= 0


def test_validation_errors():
    with pytest.raises(ValueError):
        ParabolicProblem(KERN, GRID, np.full(S, np.inf), None, np.ones(S))
    with pytest.raises(ValueError):
        ParabolicProblem(KERN, GRID, np.ones(3), None, np.ones(S))
    prob = ParabolicProblem(KERN, GRID, np.ones(S), None, np.ones(S))
    with pytest.raises(ValueError):
        solve_fk_mc(prob, 1.0, 0, 50, seed=0)
    with pytest.raises(ValueError):
        transition_matrix(KERN, GRID, -1.0)


def test_step_control_reports_suggestion():
    # a wildly stiff diagonal system cannot meet an absurd tolerance budget
    A = np.diag([-1e9, -1.0])
    with pytest.raises(StepControlError) as err:
        integrate_affine(A, None, [1.0, 1.0], [1.0], tol=1e-30, initial_step=0.5)
    assert err.value.suggested_h > 0
