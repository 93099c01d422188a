"""Closed-form first and second moments of the field, transient and limiting.

The first moment is a scalar ODE solution. The second moment (as a function
of the site separation u) is evaluated two independent ways: a geometric
series in torus-wrapped convolution powers of the jump law, and a spectral
evaluation on the torus DFT grid. The two must agree to near machine
precision; tests enforce it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import TorusGrid, kernel_table, symbol_on_grid
from .model import ModelParams, derived_rates

CRITICAL_GAP_TOL = 1e-12


def m1_closed_form(k: float, mu: float, beta: float, u0: float, t: float) -> float:
    """Mean site occupancy at time t from mean u0 at time 0.

    Valid in every criticality regime; the balanced case beta == mu
    degenerates to linear growth u0 + k*t. Accepts t = inf (subcritical
    limit k/(mu-beta)).
    """
    gap = beta - mu
    if abs(gap) <= CRITICAL_GAP_TOL * max(abs(mu), abs(beta), 1.0):
        return u0 + k * t
    growth = math.exp(gap * t) if gap * t < 700 else math.inf
    return k / gap * (growth - 1.0) + growth * u0


@dataclass(frozen=True)
class FirstMomentCurve:
    """t -> m_1(t); space-constant by homogeneity."""

    k: float
    mu: float
    beta: float
    u0: float

    def __call__(self, t: float) -> float:
        return m1_closed_form(self.k, self.mu, self.beta, self.u0, t)

    @property
    def limit(self) -> float:
        return self(math.inf)


def first_moment_curve(params: ModelParams) -> FirstMomentCurve:
    return FirstMomentCurve(k=params.k, mu=params.law.mu, beta=params.law.beta,
                            u0=params.init.raw_moment(1))


@dataclass(frozen=True)
class SecondMomentField:
    """m_2 over torus separations at one time, with its decomposition.

    ``values = decayed + scalar + spectral``: the initial-condition piece
    (exponentially dying), the space-free piece relaxing to (k/(mu-beta))^2,
    and the interaction piece evaluated per DFT frequency.
    """

    grid: TorusGrid
    time: float
    values: np.ndarray
    decayed: np.ndarray
    scalar: float
    spectral: np.ndarray
    coefficients: dict
    q: float

    def at_offset(self, offset) -> float:
        off = (offset,) if np.isscalar(offset) else tuple(offset)
        return float(self.values[self.grid.index_of(off)])


def _steady_coefficients(params: ModelParams) -> dict:
    # c2 is re-derived from the combined equation's source terms: the
    # separation-space jump source carries the origin convention a(0) = -1,
    # so its transform is (symbol - 1), not the bare symbol. The resulting
    # steady state passes the product-Poisson limit (no branching => the
    # stationary field is exactly Poisson(k/v), independent of kappa) and
    # agrees with the relation-assembled ODE and with Monte Carlo.
    rates = derived_rates(params.law)
    mu, kappa, k = params.law.mu, params.kernel.kappa, params.k
    v = mu - rates.beta
    return {
        "c1": k * kappa / v,
        "c2": -k * (mu + kappa + rates.sum_fact / 2.0) / v,
        "c3": v + kappa,
        "c4": kappa,
        "gap": v,
        "sum_fact": rates.sum_fact,
        "sum_choose2": rates.sum_choose2,
    }


def _spectral_ifft(grid: TorusGrid, values_hat: np.ndarray) -> np.ndarray:
    # valid for even symbols/tables only: ifftn returns f(-u) = f(u)
    shaped = values_hat.reshape(grid.sides)
    return np.real(np.fft.ifftn(shaped)).ravel()


def m2_transient(params: ModelParams, grid: TorusGrid, t: float) -> SecondMomentField:
    """Second moment at time t as the three-piece split of the combined equation.

    The interaction piece is the exact per-frequency scalar ODE solution on
    the torus DFT grid (exact on the torus, no step error). The source terms
    carry the stationary first moment k/(mu-beta), so the evaluation is the
    transient of the stationary-start system; see the hierarchy module for
    the general-init oracle.
    """
    params.require_subcritical(need_immigration=False)
    grid.require_supports(params.kernel)
    coeff = _steady_coefficients(params)
    v = coeff["gap"]
    mu, kappa, k = params.law.mu, params.kernel.kappa, params.k

    init_mean = params.init.raw_moment(1)
    init_sq = params.init.raw_moment(2)
    S = grid.n_sites
    init_table = np.full(S, init_mean**2)
    origin = grid.index_of((0,) * grid.dimension)
    init_table[origin] = init_sq

    finite = math.isfinite(t)
    decay = math.exp(-2.0 * v * t) if finite else 0.0
    decayed = decay * init_table
    scalar = (k / v) ** 2 * (1.0 - decay)

    ahat = symbol_on_grid(params.kernel, grid)
    lam = -2.0 * v + 2.0 * kappa * (ahat - 1.0)  # < 0 throughout (subcritical)
    source = (-2.0 * kappa * k * ahat
              + k * (2.0 * mu + 2.0 * kappa + coeff["sum_fact"])) / v
    if finite:
        spectral_hat = source * (np.exp(lam * t) - 1.0) / lam
    else:
        spectral_hat = -source / lam
    spectral = _spectral_ifft(grid, spectral_hat)

    return SecondMomentField(grid=grid, time=t, values=decayed + scalar + spectral,
                             decayed=decayed, scalar=scalar, spectral=spectral,
                             coefficients=coeff, q=kappa / (v + kappa))


def m2_steady_state_fourier(params: ModelParams, grid: TorusGrid) -> np.ndarray:
    """Limit second moment per separation, via the spectral rational form."""
    params.require_subcritical()
    grid.require_supports(params.kernel)
    c = _steady_coefficients(params)
    ahat = symbol_on_grid(params.kernel, grid)
    spectral_hat = -(c["c1"] * ahat + c["c2"]) / (c["c3"] - c["c4"] * ahat)
    return (params.k / c["gap"]) ** 2 + _spectral_ifft(grid, spectral_hat)


def m2_steady_state_series(params: ModelParams, grid: TorusGrid,
                           tol: float = 1e-12) -> np.ndarray:
    """Limit second moment per separation, via the convolution-power series.

    Truncated at N with geometric tail bound |coef| q^(N+1)/(1-q) < tol.
    """
    params.require_subcritical()
    grid.require_supports(params.kernel)
    if tol <= 0:
        raise ValueError(f"series tolerance must be positive, got {tol}")
    c = _steady_coefficients(params)
    v, kappa, k = c["gap"], params.kernel.kappa, params.k
    q = kappa / (v + kappa)
    coef = k / (v * (v + kappa)) * c["sum_choose2"]

    S = grid.n_sites
    origin = grid.index_of((0,) * grid.dimension)
    out = np.full(S, (k / v) ** 2)
    out[origin] += k / v + coef
    if coef != 0.0 and q > 0.0:
        n_terms = max(1, math.ceil(math.log(tol * (1.0 - q) / abs(coef)) / math.log(q)))
        shift = grid.shift_index_table(params.kernel.offsets)
        weights = params.kernel.weights
        power = kernel_table(params.kernel, grid)  # a^{*(1)}
        qn = q
        for _ in range(n_terms):
            out += coef * qn * power
            nxt = np.zeros(S)
            for j in range(weights.size):
                nxt += weights[j] * power[shift[:, j]]
            power = nxt
            qn *= q
    return out


def steady_covariance(params: ModelParams, grid: TorusGrid) -> np.ndarray:
    """cov(u) = m_2(inf, u) - m_1(inf)^2; decays geometrically in |u|."""
    c = _steady_coefficients(params)
    return m2_steady_state_fourier(params, grid) - (params.k / c["gap"]) ** 2
