import math

import numpy as np
import pytest

from brw.kernel import KernelSpec, TorusGrid
from brw.model import (BranchingLaw, InitialCondition, ModelError, ModelParams,
                       binary_example)
from brw.moments import (first_moment_curve, m1_closed_form,
                         m2_steady_state_fourier, m2_steady_state_series,
                         m2_transient, steady_covariance)

# frozen from the L=4096 quadrature oracle (see quadrature_oracle below)
BINARY_STEADY_U0 = 2.4082482904638631
BINARY_STEADY_U1 = 1.041241452319315
BINARY_STEADY_U2 = 1.0041662327292877


def quadrature_oracle(u, L=4096, kappa=0.25, mu=1.5, b2=0.5, k=1.0):
    """Independent steady-state evaluation: direct frequency sum, no package code.

    Transforms the combined-equation source with the origin convention
    a(0) = -1 carried explicitly: source_hat = -2 kappa k (cos - 1)/v +
    k(2 mu + sum_fact)/v.
    """
    beta = b2
    v = mu - beta
    sum_fact = 0.0
    theta = 2.0 * np.pi * np.arange(L) / L
    ahat = np.cos(theta)
    source = (-2 * kappa * k * (ahat - 1.0) + k * (2 * mu + sum_fact)) / v
    lam = -2.0 * v + 2.0 * kappa * (ahat - 1.0)
    m23_hat = -source / lam
    val = np.mean(m23_hat * np.exp(-1j * theta * u))
    return k * k / v**2 + float(np.real(val))


def test_m1_closed_form_examples():
    assert m1_closed_form(1.0, 1.5, 0.5, 1.0, 7.3) == pytest.approx(1.0)
    assert m1_closed_form(0.0, 1.5, 0.5, 1.0, 3.0) == pytest.approx(math.exp(-3.0))
    assert m1_closed_form(1.0, 1.5, 0.5, 0.0, math.inf) == pytest.approx(1.0)


def test_m1_critical_linear_growth():
    assert m1_closed_form(2.0, 0.5, 0.5, 1.0, 3.0) == pytest.approx(7.0)


def test_m1_supercritical_growth():
    val = m1_closed_form(1.0, 0.1, 0.5, 1.0, 5.0)
    assert val == pytest.approx(1.0 / 0.4 * (math.exp(2.0) - 1) + math.exp(2.0))


def test_first_moment_curve_limit():
    curve = first_moment_curve(binary_example())
    assert curve(0.0) == pytest.approx(1.0)
    assert curve.limit == pytest.approx(1.0)


def test_m2_transient_reproduces_initial_condition():
    grid = TorusGrid((16,))
    for init, sq in [(InitialCondition("const", 2), 4.0),
                     (InitialCondition("poisson", 1.5), 1.5**2 + 1.5)]:
        params = binary_example(init=init)
        field = m2_transient(params, grid, 0.0)
        mean = init.raw_moment(1)
        assert field.values[0] == pytest.approx(sq, abs=1e-14)
        for u in range(1, 16):
            assert field.values[u] == pytest.approx(mean**2, abs=1e-14)


def test_m2_transient_scalar_piece_limit():
    params = binary_example()
    field = m2_transient(params, TorusGrid((16,)), 100.0)
    assert field.scalar == pytest.approx(1.0, abs=1e-12)


def test_m2_transient_rejects_non_subcritical():
    params = ModelParams(kernel=KernelSpec.simple_random_walk(1, 0.25),
                         law=BranchingLaw(mu=0.5, b={2: 0.5}), k=1.0)
    with pytest.raises(ModelError):
        m2_transient(params, TorusGrid((16,)), 1.0)


def test_decayed_piece_log_slope():
    params = binary_example(init=InitialCondition("poisson", 2.0))
    grid = TorusGrid((16,))
    ts = np.linspace(0.5, 3.0, 8)
    vals = np.array([m2_transient(params, grid, t).decayed[0] for t in ts])
    slope = np.polyfit(ts, np.log(vals), 1)[0]
    assert slope == pytest.approx(2 * (0.5 - 1.5), rel=0.05)


def test_steady_series_matches_fourier_l64():
    params = binary_example()
    grid = TorusGrid((64,))
    series = m2_steady_state_series(params, grid)
    fourier = m2_steady_state_fourier(params, grid)
    assert np.max(np.abs(series - fourier)) < 1e-10


def test_steady_state_matches_independent_quadrature():
    params = binary_example()
    grid = TorusGrid((64,))
    fourier = m2_steady_state_fourier(params, grid)
    assert fourier[0] == pytest.approx(BINARY_STEADY_U0, abs=1e-12)
    assert fourier[1] == pytest.approx(BINARY_STEADY_U1, abs=1e-12)
    assert fourier[2] == pytest.approx(BINARY_STEADY_U2, abs=1e-12)
    # and the frozen literals themselves re-derive from the oracle
    assert quadrature_oracle(0) == pytest.approx(BINARY_STEADY_U0, abs=1e-13)
    assert quadrature_oracle(1) == pytest.approx(BINARY_STEADY_U1, abs=1e-13)
    assert quadrature_oracle(2) == pytest.approx(BINARY_STEADY_U2, abs=1e-13)


def test_steady_state_product_poisson_limit():
    # no branching: stationary field is product Poisson(k/mu), kappa-free
    params = ModelParams(kernel=KernelSpec.simple_random_walk(1, 0.7),
                         law=BranchingLaw(mu=1.3, b={}), k=0.9)
    grid = TorusGrid((32,))
    vals = m2_steady_state_fourier(params, grid)
    lam = 0.9 / 1.3
    assert vals[0] == pytest.approx(lam**2 + lam, abs=1e-12)
    assert np.max(np.abs(vals[1:] - lam**2)) < 1e-12


def test_series_truncation_tolerance_and_validation():
    params = binary_example()
    grid = TorusGrid((32,))
    loose = m2_steady_state_series(params, grid, tol=1e-4)
    tight = m2_steady_state_series(params, grid, tol=1e-14)
    assert np.max(np.abs(loose - tight)) < 1e-4
    with pytest.raises(ValueError):
        m2_steady_state_series(params, grid, tol=0.0)


def test_far_offsets_approach_squared_mean_as_kappa_vanishes():
    params = binary_example(kappa=1e-6)
    grid = TorusGrid((32,))
    vals = m2_steady_state_fourier(params, grid)
    assert vals[16] == pytest.approx(1.0, abs=1e-9)


def test_covariance_symmetry_decay_positivity():
    params = binary_example()
    grid = TorusGrid((64,))
    cov = steady_covariance(params, grid)
    assert cov[0] == pytest.approx(BINARY_STEADY_U0 - 1.0, abs=1e-12)
    for u in range(1, 32):
        assert cov[u] == pytest.approx(cov[64 - u], abs=1e-14)
    assert cov[6] < cov[2]
    assert cov[6] > 0


def test_covariance_positive_on_random_subcritical_params():
    rng = np.random.default_rng(31)
    grid = TorusGrid((32,))
    for _ in range(50):
        b = {2: float(rng.uniform(0, 1)), 3: float(rng.uniform(0, 0.3))}
        beta = b[2] + 2 * b[3]
        law = BranchingLaw(mu=beta + float(rng.uniform(0.2, 2.0)), b=b)
        params = ModelParams(
            kernel=KernelSpec.simple_random_walk(1, float(rng.uniform(0.05, 2.0))),
            law=law, k=float(rng.uniform(0.2, 3.0)))
        cov = steady_covariance(params, grid)
        assert cov[0] > 0
        q = params.kernel.kappa / (law.mu - beta + params.kernel.kappa)
        assert 0 < q < 1


def test_initial_condition_forgetting():
    grid = TorusGrid((32,))
    t_forget = 20.0  # 20 / (mu - beta)
    a = binary_example(init=InitialCondition("const", 0))
    b = binary_example(init=InitialCondition("const", 3))
    m1_gap = abs(m1_closed_form(1, 1.5, 0.5, 0.0, t_forget)
                 - m1_closed_form(1, 1.5, 0.5, 3.0, t_forget))
    assert m1_gap < 1e-6
    fa = m2_transient(a, grid, t_forget)
    fb = m2_transient(b, grid, t_forget)
    assert np.max(np.abs(fa.values - fb.values)) < 1e-6
