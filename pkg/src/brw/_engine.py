"""Compiled event-loop kernels for the exact simulator.

Deliberately low-level: flat arrays in, flat arrays out, with an explicit
xoshiro256++ state per call so replica streams are independent,
deterministic and safe to run on worker threads (callers derive one state
per replica from a master seed and never share it).
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64_ONE = np.uint64(1)
INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, nogil=True)
def _next_u64(state):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    tmp = s0 + s3
    result = ((tmp << np.uint64(23)) | (tmp >> np.uint64(41))) + s0
    t = s1 << np.uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return result


@njit(cache=True, nogil=True)
def _uniform(state):
    # in (0, 1]; never 0, so -log(u) is always finite
    return (float(_next_u64(state) >> np.uint64(11)) + 1.0) * INV_2_53


@njit(cache=True, nogil=True)
def _site_by_counts(counts, total, state):
    # site x with probability counts[x] / total
    target = _uniform(state) * total
    acc = 0.0
    for x in range(counts.size):
        acc += counts[x]
        if acc >= target:
            return x
    return counts.size - 1


@njit(cache=True, nogil=True)
def _step(counts, n_total, shift, jump_cum, kappa, mu, k_per_site,
          branch_add, branch_cum, split_total, state):
    """Draw and apply one event; returns the new total particle count."""
    S = counts.size
    rate_jump = kappa * n_total
    rate_death = mu * n_total
    rate_split = split_total * n_total
    total_rate = rate_jump + rate_death + rate_split + k_per_site * S
    r = _uniform(state) * total_rate
    if r <= rate_jump:
        x = _site_by_counts(counts, n_total, state)
        u = _uniform(state)
        j = 0
        while jump_cum[j] < u:
            j += 1
        counts[x] -= 1
        counts[shift[x, j]] += 1
        return n_total
    if r <= rate_jump + rate_death:
        x = _site_by_counts(counts, n_total, state)
        counts[x] -= 1
        return n_total - 1
    if r <= rate_jump + rate_death + rate_split:
        rr = r - rate_jump - rate_death
        j = 0
        while branch_cum[j] * n_total < rr:
            if j == branch_add.size - 1:
                break
            j += 1
        x = _site_by_counts(counts, n_total, state)
        add = branch_add[j]
        counts[x] += add
        return n_total + add
    x = int(_uniform(state) * S)
    if x >= S:
        x = S - 1
    counts[x] += 1
    return n_total + 1


@njit(cache=True, nogil=True)
def run_replica(counts, snap_times, shift, jump_cum, kappa, mu, k_per_site,
                branch_add, branch_cum, split_total, cap, state):
    """Exact-event run recording the field at each snapshot time.

    ``counts`` is modified in place. Returns (snapshots, status); status is
    0 on success, 1 when the population cap tripped (snapshots past that
    point are left at -1).
    """
    S = counts.size
    ns = snap_times.size
    snaps = np.full((ns, S), -1, dtype=np.int64)
    per_particle = kappa + mu + split_total
    n_total = 0
    for x in range(S):
        n_total += counts[x]
    t = 0.0
    si = 0
    while si < ns:
        total_rate = per_particle * n_total + k_per_site * S
        if total_rate <= 0.0:
            for j in range(si, ns):
                snaps[j] = counts
            return snaps, 0
        t_next = t - np.log(_uniform(state)) / total_rate
        while si < ns and snap_times[si] < t_next:
            snaps[si] = counts
            si += 1
        if si >= ns:
            break
        t = t_next
        n_total = _step(counts, n_total, shift, jump_cum, kappa, mu,
                        k_per_site, branch_add, branch_cum, split_total, state)
        if n_total > cap:
            return snaps, 1
    return snaps, 0


@njit(cache=True, nogil=True)
def audit_restarts(counts0, delta, n_restarts, stats, shift, jump_cum, kappa,
                   mu, k_per_site, branch_add, branch_cum, split_total, state):
    """Accumulate moments of the field increment over [0, delta] from a frozen state.

    ``stats`` rows are (x, y, p, q); y = -1 requests the single-site moment
    E[dn(x)^p], otherwise E[dn(x)^p dn(y)^q]. Returns per-statistic sums and
    sums of squares over restarts.
    """
    S = counts0.size
    n0 = 0
    for x in range(S):
        n0 += counts0[x]
    counts = np.empty(S, dtype=np.int64)
    n_stats = stats.shape[0]
    sums = np.zeros(n_stats)
    sumsq = np.zeros(n_stats)
    for _ in range(n_restarts):
        for x in range(S):
            counts[x] = counts0[x]
        n_total = n0
        t = 0.0
        while True:
            total_rate = (kappa + mu + split_total) * n_total + k_per_site * S
            if total_rate <= 0.0:
                break
            t -= np.log(_uniform(state)) / total_rate
            if t > delta:
                break
            n_total = _step(counts, n_total, shift, jump_cum, kappa, mu,
                            k_per_site, branch_add, branch_cum, split_total, state)
        for s in range(n_stats):
            x, y, p, q = stats[s, 0], stats[s, 1], stats[s, 2], stats[s, 3]
            val = 1.0
            dx = float(counts[x] - counts0[x])
            for _ in range(p):
                val *= dx
            if y >= 0:
                dy = float(counts[y] - counts0[y])
                for _ in range(q):
                    val *= dy
            sums[s] += val
            sumsq[s] += val * val
    return sums, sumsq


def make_state(seed_sequence: np.random.SeedSequence) -> np.ndarray:
    """xoshiro256++ state from a SeedSequence; guards the all-zero state."""
    state = seed_sequence.generate_state(4, dtype=np.uint64)
    if not state.any():
        state = np.array([0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9,
                          0x94D049BB133111EB, 0x2545F4914F6CDD1D], dtype=np.uint64)
    return state
