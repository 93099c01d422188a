"""Exact continuous-time Monte Carlo of the particle field on a torus.

One replica is a sequential exact-event run (exponential waiting time from
the total rate, then categorical selection among jump / death / splitting /
immigration). Ensembles drive replicas on independent streams derived from
(master seed, replica index) and merge deterministically in index order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .kernel import TorusGrid, kernel_table
from .model import ModelParams, derived_rates

DEFAULT_POPULATION_CAP = 1_000_000


class ReplicaExplosion(RuntimeError):
    """Population cap exceeded: the parameters are effectively supercritical."""

    def __init__(self, replica: int, cap: int):
        super().__init__(f"replica {replica}: population exceeded cap {cap}")
        self.replica = replica
        self.cap = cap


@dataclass(frozen=True)
class FieldState:
    """Particle counts on the torus at one simulation time."""

    grid: TorusGrid
    counts: np.ndarray
    time: float

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (self.grid.n_sites,):
            raise ValueError(f"counts must have shape ({self.grid.n_sites},)")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Event:
    """One transformation of the field (mostly for tests and tracing)."""

    kind: str  # "jump" | "death" | "branch" | "immigration"
    site: int
    timestamp: float
    offset: tuple[int, ...] | None = None
    offspring: int | None = None


def step_event(state: FieldState, params: ModelParams,
               rng: np.random.Generator) -> tuple[FieldState, Event | None]:
    """Advance the field by exactly one event.

    Waiting time is exponential in the total rate; the site is chosen
    proportionally to its rate and the kind proportionally to the per-site
    decomposition {kappa a(z) n(x), mu n(x), b_n n(x), k}. Returns
    (state, None) when no further events can occur (empty field, k = 0).

    This is the single-step reference path; ensembles use the compiled
    equivalent in _engine.
    """
    law = params.law
    kappa, mu, k = params.kernel.kappa, law.mu, params.k
    total = state.total
    S = state.grid.n_sites
    split_total = law.total_split_rate
    rate = total * (kappa + mu + split_total) + k * S
    if rate <= 0.0:
        return state, None
    dt = rng.exponential(1.0 / rate)
    t_new = state.time + dt
    counts = state.counts.copy()
    r = rng.uniform(0.0, rate)
    if r < kappa * total or r < (kappa + mu + split_total) * total:
        site = int(rng.choice(S, p=counts / total))
    else:
        site = int(rng.integers(S))
    if r < kappa * total:
        offsets = params.kernel.offsets
        j = int(rng.choice(offsets.shape[0], p=params.kernel.weights))
        coords = state.grid.coords_of(site)
        target = state.grid.index_of(tuple(c + o for c, o in zip(coords, offsets[j])))
        counts[site] -= 1
        counts[target] += 1
        event = Event("jump", site, t_new, offset=tuple(int(o) for o in offsets[j]))
    elif r < (kappa + mu) * total:
        counts[site] -= 1
        event = Event("death", site, t_new)
    elif r < (kappa + mu + split_total) * total:
        ns = sorted(law.b)
        rates = np.array([law.b[n] for n in ns])
        n = int(rng.choice(ns, p=rates / rates.sum()))
        counts[site] += n - 1
        event = Event("branch", site, t_new, offspring=n)
    else:
        counts[site] += 1
        event = Event("immigration", site, t_new)
    return FieldState(state.grid, counts, t_new), event


def _law_arrays(params: ModelParams):
    law = params.law
    ns = sorted(law.b)
    branch_add = np.array([n - 1 for n in ns], dtype=np.int64)
    rates = np.array([law.b[n] for n in ns], dtype=np.float64)
    branch_cum = np.cumsum(rates) if ns else np.zeros(0)
    split_total = float(rates.sum()) if ns else 0.0
    jump_cum = np.cumsum(params.kernel.weights)
    if jump_cum.size:
        jump_cum[-1] = 1.0  # guard float roundoff in the final band
    return branch_add, np.asarray(branch_cum, dtype=np.float64), split_total, jump_cum


def _replica_streams(master_seed: int, index: int):
    """(engine state, numpy Generator) for one replica, splittably derived."""
    root = np.random.SeedSequence((int(master_seed), int(index)))
    events_ss, init_ss = root.spawn(2)
    return _engine.make_state(events_ss), np.random.Generator(np.random.PCG64(init_ss))


def initial_counts(params: ModelParams, grid: TorusGrid,
                   rng: np.random.Generator) -> np.ndarray:
    init = params.init
    if init.kind == "const":
        return np.full(grid.n_sites, int(init.value), dtype=np.int64)
    return rng.poisson(init.value, size=grid.n_sites).astype(np.int64)


def simulate_replica(params: ModelParams, grid: TorusGrid, horizon: float,
                     snapshots=None, seed: int = 0, replica_index: int = 0,
                     cap: int = DEFAULT_POPULATION_CAP) -> list[FieldState]:
    """Exact-event run to ``horizon``; returns the field at each snapshot time."""
    params.validate()
    grid.require_supports(params.kernel)
    times = np.array([horizon] if snapshots is None else sorted(snapshots), dtype=np.float64)
    if times.size and times[-1] > horizon:
        raise ValueError(f"snapshot beyond horizon: {times[-1]} > {horizon}")
    state, init_rng = _replica_streams(seed, replica_index)
    counts = initial_counts(params, grid, init_rng)
    branch_add, branch_cum, split_total, jump_cum = _law_arrays(params)
    shift = grid.shift_index_table(params.kernel.offsets)
    snaps, status = _engine.run_replica(
        counts, times, shift, jump_cum, params.kernel.kappa, params.law.mu,
        params.k, branch_add, branch_cum, split_total, cap, state)
    if status != 0:
        raise ReplicaExplosion(replica_index, cap)
    return [FieldState(grid, snaps[i], float(times[i])) for i in range(times.size)]


@dataclass(frozen=True)
class EnsembleStats:
    """Raw snapshot counts for M replicas plus the run bookkeeping.

    ``counts`` has shape (replicas, snapshots, sites), merged in replica
    index order, so every estimator derived from it is bit-reproducible
    for a fixed (params, master_seed).
    """

    grid: TorusGrid
    times: np.ndarray
    counts: np.ndarray
    master_seed: int
    params: ModelParams = field(repr=False, default=None)

    @property
    def n_replicas(self) -> int:
        return self.counts.shape[0]

    def snapshot_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9:
            raise KeyError(f"no snapshot at t={t}; have {self.times}")
        return idx

    def site_counts(self, t: float, x: int) -> np.ndarray:
        """(M,) counts at one site and snapshot, one entry per replica."""
        return self.counts[:, self.snapshot_index(t), x]


def run_ensemble(params: ModelParams, grid: TorusGrid, horizon: float,
                 snapshots, n_replicas: int, master_seed: int,
                 cap: int = DEFAULT_POPULATION_CAP, threads: int | None = None,
                 replica_seeds=None) -> EnsembleStats:
    """Drive ``n_replicas`` independent exact-event runs and merge by index.

    ``replica_seeds`` overrides the per-replica stream derivation (used by
    tests that force identical replicas); normally every replica gets the
    stream (master_seed, index).
    """
    if n_replicas < 2:
        raise ValueError("an ensemble needs at least 2 replicas")
    params.validate()
    grid.require_supports(params.kernel)
    times = np.array(sorted(snapshots), dtype=np.float64)
    if times.size == 0:
        raise ValueError("need at least one snapshot time")
    if times[-1] > horizon:
        raise ValueError(f"snapshot beyond horizon: {times[-1]} > {horizon}")
    branch_add, branch_cum, split_total, jump_cum = _law_arrays(params)
    shift = grid.shift_index_table(params.kernel.offsets)
    kappa, mu, k = params.kernel.kappa, params.law.mu, params.k

    def one(index: int):
        seed = master_seed if replica_seeds is None else replica_seeds[index]
        rep_index = index if replica_seeds is None else 0
        state, init_rng = _replica_streams(seed, rep_index)
        counts = initial_counts(params, grid, init_rng)
        snaps, status = _engine.run_replica(
            counts, times, shift, jump_cum, kappa, mu, k,
            branch_add, branch_cum, split_total, cap, state)
        if status != 0:
            raise ReplicaExplosion(index, cap)
        return snaps

    if threads is None:
        threads = int(os.environ.get("BRW_THREADS", "1"))
    all_counts = np.empty((n_replicas, times.size, grid.n_sites), dtype=np.int64)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, snaps in enumerate(pool.map(one, range(n_replicas))):
                all_counts[i] = snaps
    else:
        for i in range(n_replicas):
            all_counts[i] = one(i)
    return EnsembleStats(grid=grid, times=times, counts=all_counts,
                         master_seed=master_seed, params=params)


@dataclass(frozen=True)
class MomentEstimate:
    order: int
    offsets: tuple
    t: float
    value: float
    se: float
    n_replicas: int
    provenance: str = "monte-carlo"


def _offset_permutation(grid: TorusGrid, offset) -> np.ndarray:
    off = (offset,) if np.isscalar(offset) else tuple(offset)
    if len(off) != grid.dimension:
        raise ValueError(f"offset {off} does not match grid dimension {grid.dimension}")
    if any(abs(c) >= L for c, L in zip(off, grid.sides)):
        raise ValueError(f"offset {off} outside torus range for sides {grid.sides}")
    return grid.shift_index_table(np.array([off], dtype=np.int64))[:, 0]


def estimate_moment(ensemble: EnsembleStats, t: float, order: int,
                    offsets=()) -> MomentEstimate:
    """Spatial+ensemble moment estimate with standard error over replicas.

    order 1 averages n(t,x); order 2 with offset u averages n(t,x)n(t,x+u);
    order 3 with offsets (u, v) averages n(t,x)n(t,x+u)n(t,x+v). Spatial
    averaging is justified by homogeneity of the field.
    """
    si = ensemble.snapshot_index(t)
    counts = ensemble.counts[:, si, :].astype(np.float64)
    if order == 1:
        per_replica = counts.mean(axis=1)
        offs = ()
    elif order == 2:
        (u,) = offsets if len(offsets) == 1 else (offsets,)
        perm = _offset_permutation(ensemble.grid, u)
        per_replica = (counts * counts[:, perm]).mean(axis=1)
        offs = (u,)
    elif order == 3:
        u, v = offsets
        pu = _offset_permutation(ensemble.grid, u)
        pv = _offset_permutation(ensemble.grid, v)
        per_replica = (counts * counts[:, pu] * counts[:, pv]).mean(axis=1)
        offs = (u, v)
    else:
        raise ValueError(f"moment order must be 1, 2 or 3, got {order}")
    m = ensemble.n_replicas
    return MomentEstimate(order=order, offsets=offs, t=t,
                          value=float(per_replica.mean()),
                          se=float(per_replica.std(ddof=1) / np.sqrt(m)),
                          n_replicas=m)


@dataclass(frozen=True)
class GFEstimate:
    z: float
    t: float
    x: int
    value: float
    se: float
    n_replicas: int


def estimate_generating_function(ensemble: EnsembleStats, z: float, t: float,
                                 x: int) -> GFEstimate:
    """Ensemble average of exp(-z n(t,x)); exactly 1 at z = 0."""
    if z < 0:
        raise ValueError(f"the transform argument must be nonnegative, got {z}")
    vals = np.exp(-z * ensemble.site_counts(t, x).astype(np.float64))
    m = ensemble.n_replicas
    return GFEstimate(z=z, t=t, x=x, value=float(vals.mean()),
                      se=float(vals.std(ddof=1) / np.sqrt(m)), n_replicas=m)


@dataclass(frozen=True)
class AuditLine:
    relation: str
    x: int
    y: int | None
    p: int
    q: int
    empirical: float
    target: float
    se: float
    bias_allowance: float

    @property
    def passed(self) -> bool:
        return abs(self.empirical - self.target) <= 3.0 * self.se + self.bias_allowance


@dataclass(frozen=True)
class AuditReport:
    delta: float
    n_restarts: int
    lines: tuple[AuditLine, ...]

    @property
    def passed(self) -> bool:
        return all(line.passed for line in self.lines)

    def failures(self) -> list[AuditLine]:
        return [line for line in self.lines if not line.passed]


def _local_intensity(params: ModelParams, grid: TorusGrid,
                     counts: np.ndarray, x: int) -> float:
    """Rate of events that change n(x), evaluated at the frozen state."""
    law = params.law
    shift = grid.shift_index_table(params.kernel.offsets)
    inflow = float(np.sum(params.kernel.weights * counts[shift[x]]))
    return (counts[x] * (params.kernel.kappa + law.mu + law.total_split_rate)
            + params.k + params.kernel.kappa * inflow)


def drift_targets(params: ModelParams, grid: TorusGrid, counts: np.ndarray,
                  x: int, y: int | None, p: int, q: int) -> float:
    """Per-unit-time conditional increment moment at the frozen state.

    Single site (y is None): E[dn(x)^p]/dt. Distinct pair: the jump-coupling
    E[dn(x)^p dn(y)^q]/dt with the signs (-1)^p, (-1)^q.
    """
    law = params.law
    kappa = params.kernel.kappa
    shift = grid.shift_index_table(params.kernel.offsets)
    a = kernel_table(params.kernel, grid)
    if y is None:
        inflow = float(np.sum(params.kernel.weights * counts[shift[x]]))
        split_sum = sum((n - 1) ** p * r for n, r in law.b.items())
        return (split_sum * counts[x] + params.k + kappa * inflow
                + (-1) ** p * (law.mu + kappa) * counts[x])
    if x == y:
        raise ValueError("pair relations need distinct sites")
    a_yx = a[grid.displacement_index(x, y)]  # a(y - x)
    a_xy = a[grid.displacement_index(y, x)]  # a(x - y)
    return kappa * ((-1) ** p * a_yx * counts[x] + (-1) ** q * a_xy * counts[y])


def drift_audit(params: ModelParams, state: FieldState, delta: float,
                n_restarts: int, seed: int = 0, pairs=None,
                mixed_powers=None) -> AuditReport:
    """Compare empirical increment moments over [0, delta] against the model's
    conditional-expectation relations, from ``n_restarts`` restarts of a
    frozen state.

    Audits E[dn(x)] and E[dn(x)^2] at every site, E[dn(x)dn(y)] for the
    requested pairs (default: all nearest pairs under the kernel), and any
    requested mixed powers (x, y, p, q). Tolerance per line is 3*SE plus a
    first-order two-event bias allowance.
    """
    grid = state.grid
    S = grid.n_sites
    if pairs is None:
        pairs = [(x, int(grid.shift_index_table(params.kernel.offsets)[x, 0]))
                 for x in range(min(S, 4))]
    stats = []
    labels = []
    for x in range(S):
        stats.append((x, -1, 1, 0))
        labels.append(("increment-mean", x, None, 1, 0))
    for x in range(S):
        stats.append((x, -1, 2, 0))
        labels.append(("increment-square", x, None, 2, 0))
    for x, y in pairs:
        stats.append((x, y, 1, 1))
        labels.append(("pair-product", x, y, 1, 1))
    for x, y, p, q in (mixed_powers or []):
        stats.append((x, y, p, q))
        labels.append(("mixed-power", x, y, p, q))

    branch_add, branch_cum, split_total, jump_cum = _law_arrays(params)
    shift = grid.shift_index_table(params.kernel.offsets)
    ss = np.random.SeedSequence((int(seed), 0xA0D17))
    rng_state = _engine.make_state(ss)
    sums, sumsq = _engine.audit_restarts(
        state.counts, delta, n_restarts, np.array(stats, dtype=np.int64),
        shift, jump_cum, params.kernel.kappa, params.law.mu, params.k,
        branch_add, branch_cum, split_total, rng_state)

    max_add = int(max(branch_add.max(initial=0), 1))
    lines = []
    for (name, x, y, p, q), total, total_sq in zip(labels, sums, sumsq):
        mean = total / n_restarts
        var = max(total_sq / n_restarts - mean**2, 0.0)
        se = np.sqrt(var / n_restarts)
        target = drift_targets(params, grid, state.counts, x, y, p, q) * delta
        lam_x = _local_intensity(params, grid, state.counts, x)
        if y is None:
            allowance = (lam_x * delta) ** 2 * (2.0 * max_add) ** p
        else:
            lam_y = _local_intensity(params, grid, state.counts, y)
            allowance = lam_x * lam_y * delta**2 * (2.0 * max_add) ** (p + q)
        lines.append(AuditLine(relation=name, x=x, y=y, p=p, q=q,
                               empirical=float(mean), target=float(target),
                               se=float(se), bias_allowance=float(allowance)))
    return AuditReport(delta=delta, n_restarts=n_restarts, lines=tuple(lines))
