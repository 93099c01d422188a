"""Stability envelopes for the moments under site-dependent rates.

Rates v(x) = mu(x) - beta(x), k(x) and the initial data are pinned to
eps-bands around constants (v0, k0, u0, u0_pair). The first moment then
stays inside explicit exponential envelopes around the constant-rate
solution; the second moment, after subtracting the diagonal-source response
L and the constant-rate limit, stays inside curves A(t), B(t). The envelope
construction follows the path representation: lower/upper bound the
potential integral, the initial data and the source separately, then
integrate in closed form. Verification solves the actual perturbed linear
systems and checks the curves sitewise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ._ode import integrate_affine
from .kernel import KernelSpec, TorusGrid, generator_matrix, kernel_table
from .model import BranchingLaw, SpatialModel


class EnvelopeError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationEnvelope:
    """Band centers and half-width: v in [v0-eps, v0+eps], etc."""

    v0: float
    k0: float
    u0: float
    u0_pair: float
    epsilon: float

    def __post_init__(self):
        for name in ("v0", "k0", "u0", "u0_pair"):
            if getattr(self, name) <= 0:
                raise EnvelopeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epsilon < 0:
            raise EnvelopeError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.epsilon > min(self.k0, self.v0) / 2.0:
            raise EnvelopeError(
                f"epsilon={self.epsilon} exceeds min(k0, v0)/2 = "
                f"{min(self.k0, self.v0) / 2.0}; the bound constants need it")


def m1_envelope(env: PerturbationEnvelope, u0: float, t):
    """(lower, upper) curves for the first moment at time(s) t.

    upper: (k0+e)/(v0-e) + e^{-(v0-e)t} (u0+e - (k0+e)/(v0-e))
    lower: (k0-e)/(v0+e) + e^{-(v0+e)t} (u0-e - (k0-e)/(v0+e))

    The +-eps rides on u0 as well: the path representation bounds the
    initial data by u0+-eps, and without it any draw starting above u0
    would escape the "envelope" at t=0.
    """
    e = env.epsilon
    if e >= env.v0:
        raise EnvelopeError(f"epsilon={e} must be below v0={env.v0}")
    t = np.asarray(t, dtype=np.float64)
    hi_level = (env.k0 + e) / (env.v0 - e)
    lo_level = (env.k0 - e) / (env.v0 + e)
    upper = hi_level + np.exp(-(env.v0 - e) * t) * ((u0 + e) - hi_level)
    lower = lo_level + np.exp(-(env.v0 + e) * t) * ((u0 - e) - lo_level)
    return lower, upper


@dataclass(frozen=True)
class EnvelopeBounds:
    """Explicit envelope curves and their constants for one (env, kappa).

    First moment: k0/v0 + C1m*eps + C0m e^{-(v0+eps)t} <= m1 - 0 ... <=
    k0/v0 + C1p*eps + C0p e^{-(v0-eps)t} (the m1_envelope curves regrouped
    around the constant-rate limit).

    Second moment: A(t) <= m2 - L - k0^2/v0^2 <= B(t) with
      B = C2p e^{-(v0-e)t} + C3p e^{-2(v0-e)t} + C4p*eps
          + (kappa k0/v0^2)(1 - e^{-2(v0-e)t})
      A = C2m e^{-(v0+e)t} + C3m e^{-2(v0+e)t} + C4m*eps
          - (kappa k0/v0^2)(1 - e^{-2(v0-e)t})
    assembled exactly from the chain: the B side needs no slack; the A side
    absorbs its kappa-exponential remainder by its infimum over t, so A is a
    valid (slightly weakened) lower bound for every admissible draw.
    """

    env: PerturbationEnvelope
    kappa: float
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        env, e, kap = self.env, self.env.epsilon, self.kappa
        if env.u0 < e:
            raise EnvelopeError(
                f"the second-moment chain needs u0 >= epsilon (nonnegative "
                f"initial means); got u0={env.u0}, epsilon={e}")
        r_hi = env.v0 - e          # slow rate (upper side)
        r_lo = env.v0 + e          # fast rate (lower side)
        P_hi = (env.k0 + e) / r_hi
        Q_hi = (env.u0 + e) - P_hi
        P_lo = (env.k0 - e) / r_lo
        Q_lo = (env.u0 - e) - P_lo
        window = kap * env.k0 / env.v0**2

        c0p, c0m = Q_hi, Q_lo
        c1p = 0.0 if e == 0 else (P_hi - env.k0 / env.v0) / e
        c1m = 0.0 if e == 0 else (P_lo - env.k0 / env.v0) / e

        gain_hi = env.k0 + e + kap
        c2p = 2.0 * gain_hi * Q_hi / r_hi
        c4p_eps = gain_hi * P_hi / r_hi - (env.k0**2 + kap * env.k0) / env.v0**2
        c3p = (env.u0_pair + e) - gain_hi * P_hi / r_hi \
            - 2.0 * gain_hi * Q_hi / r_hi + window

        gain_lo = env.k0 - e
        c2m = 2.0 * gain_lo * Q_lo / r_lo
        c3m = (env.u0_pair - e) - gain_lo * P_lo / r_lo - 2.0 * gain_lo * Q_lo / r_lo
        # kappa-exponential remainder of the exact lower chain,
        # g(t) = alpha w + beta w^2 with w = e^{-(v0-e)t}; absorb inf g into
        # the constant so the printed A-structure stays a true lower bound.
        alpha = -2.0 * kap * Q_hi / r_hi
        beta = kap * P_hi / r_hi + 2.0 * kap * Q_hi / r_hi - window
        candidates = [0.0, alpha + beta]
        if beta > 0 and 0.0 < -alpha / (2.0 * beta) <= 1.0:
            candidates.append(-alpha**2 / (4.0 * beta))
        absorb = min(candidates)
        c4m_eps = gain_lo * P_lo / r_lo - kap * P_hi / r_hi \
            - env.k0**2 / env.v0**2 + window + absorb

        object.__setattr__(self, "constants", {
            "c0_plus": c0p, "c0_minus": c0m, "c1_plus": c1p, "c1_minus": c1m,
            "c2_plus": c2p, "c2_minus": c2m, "c3_plus": c3p, "c3_minus": c3m,
            "c4_plus_eps": c4p_eps, "c4_minus_eps": c4m_eps,
            "window": window, "rate_hi": r_hi, "rate_lo": r_lo,
        })

    def m1_bounds(self, t):
        return m1_envelope(self.env, self.env.u0, t)

    def m2_upper(self, t):
        c = self.constants
        t = np.asarray(t, dtype=np.float64)
        slow = np.exp(-c["rate_hi"] * t)
        return (c["c2_plus"] * slow + c["c3_plus"] * slow**2
                + c["c4_plus_eps"] + c["window"] * (1.0 - slow**2))

    def m2_lower(self, t):
        c = self.constants
        t = np.asarray(t, dtype=np.float64)
        fast = np.exp(-c["rate_lo"] * t)
        slow = np.exp(-c["rate_hi"] * t)
        return (c["c2_minus"] * fast + c["c3_minus"] * fast**2
                + c["c4_minus_eps"] - c["window"] * (1.0 - slow**2))

    def m2_lower_exact(self, t):
        """The unabsorbed five-term chain (tighter than m2_lower)."""
        env, e, kap = self.env, self.env.epsilon, self.kappa
        c = self.constants
        t = np.asarray(t, dtype=np.float64)
        fast = np.exp(-c["rate_lo"] * t)
        slow = np.exp(-c["rate_hi"] * t)
        P_hi = (env.k0 + e) / c["rate_hi"]
        Q_hi = (env.u0 + e) - P_hi
        P_lo = (env.k0 - e) / c["rate_lo"]
        alpha = -2.0 * kap * Q_hi / c["rate_hi"]
        beta = kap * P_hi / c["rate_hi"] + 2.0 * kap * Q_hi / c["rate_hi"] - c["window"]
        const = (env.k0 - e) * P_lo / c["rate_lo"] - kap * P_hi / c["rate_hi"] \
            - env.k0**2 / env.v0**2 + c["window"]
        return (c["c2_minus"] * fast + c["c3_minus"] * fast**2 + const
                + alpha * slow + beta * slow**2
                - c["window"] * (1.0 - slow**2))


@dataclass(frozen=True)
class AssumptionViolation:
    assumption: str
    site: tuple
    value: float
    band: tuple[float, float]


@dataclass(frozen=True)
class AssumptionReport:
    ok: bool
    violations: tuple[AssumptionViolation, ...]

    @property
    def first(self) -> AssumptionViolation | None:
        return self.violations[0] if self.violations else None


def _band_check(name, values, lo, hi, out, pair=False):
    values = np.asarray(values, dtype=np.float64)
    bad = np.argwhere((values < lo) | (values > hi))
    for idx in bad:
        site = tuple(int(i) for i in idx) if pair else (int(idx[0]),)
        out.append(AssumptionViolation(name, site, float(values[tuple(idx)]), (lo, hi)))


def check_assumptions(spatial: SpatialModel, env: PerturbationEnvelope,
                      u0_field=None, u0_pair_field=None) -> AssumptionReport:
    """Sitewise band checks of the rate and initial-data fields."""
    e = env.epsilon
    out: list[AssumptionViolation] = []
    _band_check("rate-gap", spatial.v_table, env.v0 - e, env.v0 + e, out)
    _band_check("immigration", spatial.k, env.k0 - e, env.k0 + e, out)
    if u0_field is not None:
        _band_check("initial-mean", u0_field, env.u0 - e, env.u0 + e, out)
    if u0_pair_field is not None:
        _band_check("initial-pair", u0_pair_field, env.u0_pair - e,
                     env.u0_pair + e, out, pair=True)
    return AssumptionReport(not out, tuple(out))


@dataclass(frozen=True)
class AdmissibleDraw:
    v: np.ndarray
    k: np.ndarray
    u0: np.ndarray
    u0_pair: np.ndarray


def draw_admissible(env: PerturbationEnvelope, grid: TorusGrid,
                    rng: np.random.Generator) -> AdmissibleDraw:
    """i.i.d. uniform fields on the admissible bands; the pair field is
    drawn on the upper triangle and mirrored (symmetric, still uniform)."""
    S = grid.n_sites
    e = env.epsilon
    v = rng.uniform(env.v0 - e, env.v0 + e, S)
    k = rng.uniform(env.k0 - e, env.k0 + e, S)
    u0 = rng.uniform(env.u0 - e, env.u0 + e, S)
    pair = rng.uniform(env.u0_pair - e, env.u0_pair + e, (S, S))
    upper = np.triu(pair)
    u0_pair = upper + np.triu(pair, 1).T
    return AdmissibleDraw(v=v, k=k, u0=u0, u0_pair=u0_pair)


def spatial_from_fields(kernel: KernelSpec, grid: TorusGrid, v: np.ndarray,
                        k: np.ndarray, base_law: BranchingLaw) -> SpatialModel:
    """Admissible spatial model with the base offspring table held constant
    and mu(x) = v(x) + beta adjusting the gap."""
    S = grid.n_sites
    beta = base_law.beta
    return SpatialModel(kernel=kernel, grid=grid, mu=v + beta,
                        b={n: np.full(S, r) for n, r in base_law.b.items()},
                        k=np.asarray(k, dtype=np.float64))


def m1_matrix(spatial: SpatialModel, scale: float) -> np.ndarray:
    return scale * generator_matrix(spatial.kernel, spatial.grid) - np.diag(spatial.v_table)


def m1_solution(spatial: SpatialModel, u0_field: np.ndarray, scale: float = 1.0):
    """Exact evaluator t -> m_1(t, .) via the matrix exponential."""
    A = m1_matrix(spatial, scale)
    fixed = np.linalg.solve(A, -spatial.k)
    u0 = np.asarray(u0_field, dtype=np.float64)

    def evaluate(t: float) -> np.ndarray:
        return expm(t * A) @ (u0 - fixed) + fixed

    return evaluate


def _full_jump_table(kernel: KernelSpec, grid: TorusGrid) -> np.ndarray:
    """Jump weights on the separation torus with the origin convention -1."""
    table = kernel_table(kernel, grid)
    table[grid.index_of((0,) * grid.dimension)] = -1.0
    return table


def second_moment_functions(spatial: SpatialModel, m1_eval):
    """(V, F, f) of the pair system for a given m_1 evaluator.

    V is a (S, S) array; F and f are callables of t. The separation weight
    a(x-y) uses the origin convention a(0) = -1, which is what feeds the
    diagonal jump-noise term +2 kappa m_1.
    """
    grid, kernel = spatial.grid, spatial.kernel
    S = grid.n_sites
    kappa = kernel.kappa
    G = generator_matrix(kernel, grid)
    V = np.add.outer(spatial.v_table, spatial.v_table)
    f_coef = spatial.mu + spatial.sum_sq_table

    a_full = _full_jump_table(kernel, grid)
    disp = np.empty((S, S), dtype=np.int64)
    for x in range(S):
        for y in range(S):
            disp[x, y] = grid.displacement_index(y, x)  # index of x - y
    a_pair = a_full[disp]

    def F(t: float) -> np.ndarray:
        m1 = m1_eval(t)
        return m1 * f_coef + spatial.k + kappa * (G @ m1)

    def f(t: float) -> np.ndarray:
        m1 = m1_eval(t)
        out = spatial.k[:, None] * m1[None, :] + spatial.k[None, :] * m1[:, None]
        out -= kappa * a_pair * (m1[:, None] + m1[None, :])
        out[np.arange(S), np.arange(S)] += F(t)
        return out

    return V, F, f


def _pair_generator(kernel: KernelSpec, grid: TorusGrid) -> np.ndarray:
    G = generator_matrix(kernel, grid)
    eye = np.eye(grid.n_sites)
    return np.kron(G, eye) + np.kron(eye, G)


def _pair_coupling(spatial: SpatialModel, diagonal_only: bool = False):
    """Matrix B with f(t) = B m_1(t) + const, rows indexed by pairs (x,y).

    ``diagonal_only`` keeps just the delta-source part (the L system).
    """
    grid, kernel = spatial.grid, spatial.kernel
    S = grid.n_sites
    kappa = kernel.kappa
    G = generator_matrix(kernel, grid)
    f_coef = spatial.mu + spatial.sum_sq_table
    B = np.zeros((S * S, S))
    const = np.zeros(S * S)
    rows = np.arange(S * S)
    xs, ys = rows // S, rows % S
    if not diagonal_only:
        a_full = _full_jump_table(kernel, grid)
        disp = np.empty(S * S, dtype=np.int64)
        for r, (x, y) in enumerate(zip(xs, ys)):
            disp[r] = grid.displacement_index(int(y), int(x))
        a_vals = a_full[disp]
        B[rows, ys] += spatial.k[xs]
        B[rows, xs] += spatial.k[ys]
        B[rows, xs] -= kappa * a_vals
        B[rows, ys] -= kappa * a_vals
    for x in range(S):
        row = x * S + x
        B[row, x] += f_coef[x]
        B[row, :] += kappa * G[x, :]
        const[row] += spatial.k[x]
    return B, const


@dataclass(frozen=True)
class PairSolution:
    """Joint trajectory of m_1 and the requested pair blocks."""

    times: np.ndarray
    m1: np.ndarray          # (nt, S)
    m2: np.ndarray          # (nt, S, S)
    L: np.ndarray           # (nt, S, S)
    no_delta: np.ndarray | None = None
    g_piece: np.ndarray | None = None


def solve_pair_system(spatial: SpatialModel, u0_field, u0_pair_field, times,
                      diffusion_scale: float = 1.0, m1_scale: float = 1.0,
                      with_subcheck_blocks: bool = False,
                      tol: float = 1e-9) -> PairSolution:
    """Integrate m_1, the full pair system, and L in one stacked linear ODE.

    One stacked system means one step sequence, so linear identities
    between the blocks (full - no_delta = L) hold to rounding error.
    """
    grid = spatial.grid
    S = grid.n_sites
    P = S * S
    A1 = m1_matrix(spatial, m1_scale)
    A2 = diffusion_scale * _pair_generator(spatial.kernel, grid) \
        - np.diag(np.add.outer(spatial.v_table, spatial.v_table).ravel())
    B_full, const_full = _pair_coupling(spatial, diagonal_only=False)
    B_diag, const_diag = _pair_coupling(spatial, diagonal_only=True)

    blocks = 3 + (2 if with_subcheck_blocks else 0)
    dim = S + blocks * P
    A = np.zeros((dim, dim))
    const = np.zeros(dim)
    y0 = np.zeros(dim)
    A[:S, :S] = A1
    const[:S] = spatial.k
    y0[:S] = np.asarray(u0_field, dtype=np.float64)

    u0_pair = np.asarray(u0_pair_field, dtype=np.float64).ravel()
    specs = [(B_full, const_full, u0_pair), (B_diag, const_diag, np.zeros(P))]
    if with_subcheck_blocks:
        specs.append((B_full - B_diag, const_full - const_diag, u0_pair))
        specs.append((np.zeros((P, S)), np.zeros(P), u0_pair))
    for i, (B, c, init) in enumerate(specs):
        lo = S + i * P
        A[lo:lo + P, lo:lo + P] = A2
        A[lo:lo + P, :S] = B
        const[lo:lo + P] = c
        y0[lo:lo + P] = init

    ts = np.atleast_1d(np.asarray(times, dtype=np.float64))
    traj = integrate_affine(A, const, y0, ts, tol=tol)
    out = {
        "m1": traj[:, :S],
        "m2": traj[:, S:S + P].reshape(-1, S, S),
        "L": traj[:, S + P:S + 2 * P].reshape(-1, S, S),
    }
    if with_subcheck_blocks:
        out["no_delta"] = traj[:, S + 2 * P:S + 3 * P].reshape(-1, S, S)
        out["g_piece"] = traj[:, S + 3 * P:S + 4 * P].reshape(-1, S, S)
    return PairSolution(times=ts, **out)


def compute_L(spatial: SpatialModel, u0_field, times,
              diffusion_scale: float = 1.0, m1_scale: float = 1.0,
              tol: float = 1e-9) -> np.ndarray:
    """Response of the pair system to the diagonal source alone: (nt, S, S)."""
    sol = solve_pair_system(spatial, u0_field, np.zeros((spatial.grid.n_sites,) * 2),
                            times, diffusion_scale, m1_scale, tol=tol)
    return sol.L


@dataclass(frozen=True)
class StabilityReport:
    trials: int
    n_violations: int
    worst_margin: float
    details: tuple = ()
    subchecks: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def verify_m1_stability(kernel: KernelSpec, env: PerturbationEnvelope,
                        grid: TorusGrid, horizon: float, trials: int,
                        seed: int = 0, scale: float = 1.0, n_times: int = 41,
                        violation_tol: float = 1e-8) -> StabilityReport:
    """Solve the perturbed first-moment system for random admissible draws
    and check the envelope sitewise at every output time."""
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, horizon, n_times)
    lower, upper = m1_envelope(env, env.u0, times)
    violations = []
    worst = math.inf
    G = generator_matrix(kernel, grid)
    for trial in range(trials):
        draw = draw_admissible(env, grid, rng)
        A = scale * G - np.diag(draw.v)
        traj = integrate_affine(A, draw.k, draw.u0, times, tol=1e-10)
        lo_margin = traj - lower[:, None]
        hi_margin = upper[:, None] - traj
        margin = float(min(lo_margin.min(), hi_margin.min()))
        worst = min(worst, margin)
        if margin < -violation_tol:
            ti, xi = np.unravel_index(
                np.argmin(np.minimum(lo_margin, hi_margin)), traj.shape)
            violations.append((trial, float(times[ti]), int(xi), margin))
    return StabilityReport(trials=trials, n_violations=len(violations),
                           worst_margin=worst, details=tuple(violations))


def verify_m2_stability(kernel: KernelSpec, base_law: BranchingLaw,
                        env: PerturbationEnvelope, grid: TorusGrid,
                        horizon: float, trials: int, seed: int = 0,
                        diffusion_scale: float = 1.0, m1_scale: float = 1.0,
                        n_times: int = 33, violation_tol: float = 1e-8,
                        run_subchecks: bool = True) -> StabilityReport:
    """Solve the perturbed pair system per draw and check A <= m2 - L -
    (k0/v0)^2 <= B sitewise; optionally also the G-piece band and the
    L-linearity identity."""
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, horizon, n_times)
    bounds = EnvelopeBounds(env, kernel.kappa)
    centre = (env.k0 / env.v0) ** 2
    violations = []
    worst = math.inf
    sub = {"g_piece_margin": math.inf, "linearity_residual": 0.0}
    for trial in range(trials):
        draw = draw_admissible(env, grid, rng)
        spatial = spatial_from_fields(kernel, grid, draw.v, draw.k, base_law)
        sol = solve_pair_system(spatial, draw.u0, draw.u0_pair, times,
                                diffusion_scale, m1_scale,
                                with_subcheck_blocks=run_subchecks)
        centered = sol.m2 - sol.L - centre
        A = bounds.m2_lower(times)[:, None, None]
        B = bounds.m2_upper(times)[:, None, None]
        margin = float(min((centered - A).min(), (B - centered).min()))
        worst = min(worst, margin)
        if margin < -violation_tol:
            violations.append((trial, margin))
        if run_subchecks:
            e = env.epsilon
            g_lo = (env.u0_pair - e) * np.exp(-2 * (env.v0 + e) * times)
            g_hi = (env.u0_pair + e) * np.exp(-2 * (env.v0 - e) * times)
            gm = float(min((sol.g_piece - g_lo[:, None, None]).min(),
                           (g_hi[:, None, None] - sol.g_piece).min()))
            sub["g_piece_margin"] = min(sub["g_piece_margin"], gm)
            resid = float(np.max(np.abs(sol.m2 - sol.no_delta - sol.L)))
            sub["linearity_residual"] = max(sub["linearity_residual"], resid)
    return StabilityReport(trials=trials, n_violations=len(violations),
                           worst_margin=worst, details=tuple(violations),
                           subchecks=sub)
