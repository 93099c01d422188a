import numpy as np
import pytest

from brw.hierarchy import (MomentTensor, assemble, initial_tensor, integrate,
                           integrate_orders)
from brw.kernel import KernelSpec, TorusGrid, generator_matrix, kernel_table
from brw.model import (BranchingLaw, InitialCondition, ModelParams,
                       binary_example)
from brw.moments import m1_closed_form, m2_transient


def test_order1_operator_matches_first_moment_equation():
    """Hand-built expected matrix: (beta-mu) I + kappa (jump-scatter - I)."""
    params = binary_example()
    grid = TorusGrid((8,))
    op = assemble(1, params, grid)
    expected = np.zeros((8, 8))
    for x in range(8):
        expected[x, x] += (0.5 - 1.5) - 0.25
        expected[x, (x + 1) % 8] += 0.25 * 0.5
        expected[x, (x - 1) % 8] += 0.25 * 0.5
    assert np.max(np.abs(op.matrix - expected)) < 1e-14
    assert np.allclose(op.constant, 1.0)
    assert op.lower == {}


def test_order1_trajectory_matches_closed_form():
    params = binary_example(init=InitialCondition("const", 0))
    grid = TorusGrid((8,))
    frames = integrate_orders(1, params, grid, [0.5, 3.0])
    for frame, t in zip(frames, [0.5, 3.0]):
        want = m1_closed_form(1.0, 1.5, 0.5, 0.0, t)
        assert np.max(np.abs(frame[1].values - want)) < 1e-9


def test_order2_homogeneous_reduction_matches_combined_equation():
    """Restricting the assembled pair operator to separation space must
    reproduce the combined-equation coefficients exactly."""
    params = binary_example()
    S = 8
    grid = TorusGrid((S,))
    op = assemble(2, params, grid)
    kappa, mu, k = 0.25, 1.5, 1.0
    beta, v, sum_fact = 0.5, 1.0, 0.0

    def embed(g):
        m = np.zeros((S, S))
        for x in range(S):
            for y in range(S):
                m[x, y] = g[(x - y) % S]
        return m.ravel()

    G_sep = generator_matrix(params.kernel, grid)
    reduced_expected = 2 * (beta - mu) * np.eye(S) + 2 * kappa * G_sep
    # moment tensors are symmetric, so the homogeneous subspace is spanned by
    # the even separation indicators g(u) = g(-u)
    for u in range(S // 2 + 1):
        g = np.zeros(S)
        g[u] = 1.0
        g[(S - u) % S] = 1.0
        full = (op.matrix @ embed(g)).reshape(S, S)
        want = reduced_expected @ g
        # pair row (x, y) must act as the separation operator at x - y
        for x in range(S):
            for y in range(S):
                assert full[x, y] == pytest.approx(want[(x - y) % S], abs=1e-12)
    # source at the stationary first moment: 2k^2/v - 2 kappa k a(u)/v
    # (origin carries a(0) = -1) + delta_0 k (2 mu + sum_fact)/v
    a = kernel_table(params.kernel, grid)
    m1_vec = np.full(S, k / v)
    source = (op.lower[1] @ m1_vec + op.constant).reshape(S, S)[:, 0]
    for u in range(S):
        a_u = a[u] if u != 0 else -1.0
        want = 2 * k**2 / v - 2 * kappa * k * a_u / v
        if u == 0:
            want += k * (2 * mu + sum_fact) / v
        assert source[u] == pytest.approx(want, abs=1e-12)


def test_order2_matches_transient_evaluator():
    params = binary_example()
    S = 8
    grid = TorusGrid((S,))
    times = [1.0, 4.0]
    frames = integrate_orders(2, params, grid, times, tol=1e-10)
    worst = 0.0
    for frame, t in zip(frames, times):
        field = m2_transient(params, grid, t)
        m2 = frame[2].values
        for x in range(S):
            for y in range(S):
                worst = max(worst, abs(m2[x, y] - field.values[(x - y) % S]))
    assert worst < 1e-8


def test_pure_jump_pair_mass_conserved():
    params = ModelParams(kernel=KernelSpec.simple_random_walk(1, 0.5),
                         law=BranchingLaw(mu=0.0, b={}), k=0.0,
                         init=InitialCondition("poisson", 1.0))
    grid = TorusGrid((6,))
    frames = integrate_orders(2, params, grid, [0.0, 2.0, 5.0])
    totals = [frame[2].values.sum() for frame in frames]
    assert totals[1] == pytest.approx(totals[0], abs=1e-10)
    assert totals[2] == pytest.approx(totals[0], abs=1e-10)


def test_independent_sites_factorize_without_jumps_or_immigration():
    # kappa must vanish for exact factorization; the spec keeps kappa > 0 as
    # a kernel invariant, so use one far below the assertion tolerance
    params = ModelParams(kernel=KernelSpec.simple_random_walk(1, 1e-13),
                         law=BranchingLaw(mu=1.0, b={2: 0.3}), k=0.0,
                         init=InitialCondition("poisson", 2.0))
    grid = TorusGrid((6,))
    op1 = assemble(1, params, grid)
    op2 = assemble(2, params, grid)
    init = [initial_tensor(1, params, grid), initial_tensor(2, params, grid)]
    frames = integrate([op1, op2], init, [1.5], tol=1e-12)
    m1 = frames[0][1].values
    m2 = frames[0][2].values
    for x in range(6):
        for y in range(6):
            if x != y:
                assert m2[x, y] == pytest.approx(m1[x] * m1[y], abs=1e-10)


def test_permutation_symmetry_preserved_order3():
    params = binary_example(init=InitialCondition("poisson", 1.0))
    grid = TorusGrid((4,))
    frames = integrate_orders(3, params, grid, [0.0, 1.0, 3.0])
    for frame in frames:
        assert frame[3].max_asymmetry() < 1e-10
        assert frame[2].max_asymmetry() < 1e-10


def test_triangular_causality_bit_identical():
    params = binary_example()
    grid = TorusGrid((4,))
    ops = [assemble(n, params, grid) for n in (1, 2, 3)]
    base = [initial_tensor(n, params, grid) for n in (1, 2, 3)]
    perturbed_m3 = MomentTensor(order=3, grid=grid,
                                values=base[2].values + 0.5, time=0.0)
    frames_a = integrate(ops, base, [2.0])
    frames_b = integrate(ops, [base[0], base[1], perturbed_m3], [2.0])
    assert np.array_equal(frames_a[0][1].values, frames_b[0][1].values)
    assert np.array_equal(frames_a[0][2].values, frames_b[0][2].values)
    assert not np.array_equal(frames_a[0][3].values, frames_b[0][3].values)


def test_initial_tensor_mixed_moments():
    lam = 1.5
    params = binary_example(init=InitialCondition("poisson", lam))
    grid = TorusGrid((4,))
    t3 = initial_tensor(3, params, grid).values
    assert t3[0, 1, 2] == pytest.approx(lam**3)
    assert t3[0, 0, 1] == pytest.approx((lam**2 + lam) * lam)
    assert t3[2, 2, 2] == pytest.approx(lam**3 + 3 * lam**2 + lam)


def test_order_bounds_rejected():
    params = binary_example()
    grid = TorusGrid((4,))
    with pytest.raises(ValueError):
        assemble(4, params, grid)
    with pytest.raises(ValueError):
        assemble(0, params, grid)
    op2 = assemble(2, params, grid)
    with pytest.raises(ValueError):
        integrate([op2], [initial_tensor(2, params, grid)], [1.0])
