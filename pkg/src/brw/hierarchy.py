"""Moment-tensor ODE systems assembled directly from the increment relations.

For order n <= 3 on a small torus, the time derivative of
E[n(t,x_1)...n(t,x_n)] expands the product of per-site increments and keeps
the O(dt) terms: single-site increment moments of every power, and the
jump-coupling moments for pairs of distinct sites. The assembly below walks
exactly that expansion, with binomial bookkeeping for coincident sites, so
the printed low-order equations become test targets instead of inputs.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from ._ode import integrate_affine
from .kernel import TorusGrid, kernel_table
from .model import ModelParams

MAX_ORDER = 3


@dataclass(frozen=True)
class MomentTensor:
    """Dense m_n values over site tuples at one time."""

    order: int
    grid: TorusGrid
    values: np.ndarray
    time: float
    provenance: str = "ode"

    def at_sites(self, *sites) -> float:
        if len(sites) != self.order:
            raise ValueError(f"need {self.order} sites, got {len(sites)}")
        return float(self.values[tuple(sites)])

    def max_asymmetry(self) -> float:
        """Largest deviation under any axis permutation (0 for exact symmetry)."""
        worst = 0.0
        axes = list(range(self.order))
        for perm in set(tuple(p) for p in _permutations(axes)):
            worst = max(worst, float(np.max(np.abs(
                self.values - np.transpose(self.values, perm)))))
        return worst


def _permutations(items):
    if len(items) <= 1:
        yield tuple(items)
        return
    for i in range(len(items)):
        for rest in _permutations(items[:i] + items[i + 1:]):
            yield (items[i],) + rest


@dataclass(frozen=True)
class HierarchyOperator:
    """Affine generator of one tensor order: matrix + lower-order couplings.

    d vec(m_n)/dt = matrix @ vec(m_n) + sum_q lower[q] @ vec(m_q) + constant.
    """

    order: int
    grid: TorusGrid
    matrix: np.ndarray
    lower: dict[int, np.ndarray] = field(repr=False)
    constant: np.ndarray = field(repr=False)


def _flat_index(sites: tuple[int, ...], n_sites: int) -> int:
    idx = 0
    for s in sites:
        idx = idx * n_sites + s
    return idx


def assemble(order: int, params: ModelParams, grid: TorusGrid) -> HierarchyOperator:
    """Build the order-n generator from the per-site increment relations."""
    if not (1 <= order <= MAX_ORDER):
        raise ValueError(f"assembly supports orders 1..{MAX_ORDER}, got {order}")
    params.validate()
    grid.require_supports(params.kernel)
    S = grid.n_sites
    law = params.law
    kappa, mu, k = params.kernel.kappa, law.mu, params.k
    shift = grid.shift_index_table(params.kernel.offsets)
    weights = params.kernel.weights
    a_table = kernel_table(params.kernel, grid)
    split_power = {c: sum((m - 1) ** c * r for m, r in law.b.items())
                   for c in range(1, order + 1)}

    dim_n = S**order
    matrix = np.zeros((dim_n, dim_n))
    lower = {q: np.zeros((dim_n, S**q)) for q in range(1, order)}
    constant = np.zeros(dim_n)

    def write(row: int, value: float, multiset: list[int]):
        q = len(multiset)
        target = _flat_index(tuple(sorted(multiset)), S)
        if q == order:
            matrix[row, target] += value
        elif q == 0:
            constant[row] += value
        else:
            lower[q][row, target] += value

    for tup in product(range(S), repeat=order):
        row = _flat_index(tup, S)
        groups = Counter(tup)
        sites = sorted(groups)
        # single-site increment moments, all powers
        for y in sites:
            p_y = groups[y]
            base = list(tup)
            for _ in range(p_y):
                base.remove(y)
            rest = list(base)
            for c in range(1, p_y + 1):
                coef = math.comb(p_y, c)
                remaining = rest + [y] * (p_y - c)
                write(row, coef * (split_power[c] + (-1) ** c * (mu + kappa)),
                      remaining + [y])
                write(row, coef * k, remaining)
                for j in range(weights.size):
                    write(row, coef * kappa * weights[j],
                          remaining + [int(shift[y, j])])
        # jump coupling between each pair of distinct sites
        for i, y in enumerate(sites):
            for y2 in sites[i + 1:]:
                p_y, p_y2 = groups[y], groups[y2]
                a_fwd = a_table[grid.displacement_index(y, y2)]   # a(y2 - y)
                a_bwd = a_table[grid.displacement_index(y2, y)]   # a(y - y2)
                if a_fwd == 0.0 and a_bwd == 0.0:
                    continue
                for c in range(1, p_y + 1):
                    for c2 in range(1, p_y2 + 1):
                        coef = math.comb(p_y, c) * math.comb(p_y2, c2)
                        remaining = list(tup)
                        for _ in range(c):
                            remaining.remove(y)
                        for _ in range(c2):
                            remaining.remove(y2)
                        write(row, coef * kappa * (-1) ** c * a_fwd,
                              remaining + [y])
                        write(row, coef * kappa * (-1) ** c2 * a_bwd,
                              remaining + [y2])

    return HierarchyOperator(order=order, grid=grid, matrix=matrix,
                             lower=lower, constant=constant)


def initial_tensor(order: int, params: ModelParams, grid: TorusGrid) -> MomentTensor:
    """Mixed initial moments of the i.i.d. per-site law.

    Independence across distinct sites factorizes each tuple moment into a
    product of per-site raw moments of the multiplicity.
    """
    S = grid.n_sites
    values = np.empty((S,) * order)
    site_moment = {p: params.init.raw_moment(p) for p in range(1, order + 1)}
    for tup in product(range(S), repeat=order):
        prod = 1.0
        for _, mult in Counter(tup).items():
            prod *= site_moment[mult]
        values[tup] = prod
    return MomentTensor(order=order, grid=grid, values=values, time=0.0,
                        provenance="initial")


def integrate(operators: list[HierarchyOperator], initial: list[MomentTensor],
              times, tol: float = 1e-8) -> list[dict[int, MomentTensor]]:
    """Joint trajectory of the stacked orders 1..n at the requested times.

    The stacked system is block lower-triangular in the order, so lower
    orders evolve independently of higher ones (perturbing m_3 initial data
    cannot move m_1 or m_2).
    """
    if not operators:
        raise ValueError("need at least one operator")
    operators = sorted(operators, key=lambda op: op.order)
    orders = [op.order for op in operators]
    if orders != list(range(1, len(operators) + 1)):
        raise ValueError(f"operators must cover orders 1..n, got {orders}")
    by_order = {t.order: t for t in initial}
    if sorted(by_order) != orders:
        raise ValueError("initial tensors must match operator orders")
    grid = operators[0].grid
    S = grid.n_sites
    dims = [S**n for n in orders]
    offsets = np.concatenate([[0], np.cumsum(dims)])
    dim = int(offsets[-1])

    A = np.zeros((dim, dim))
    const = np.zeros(dim)
    for op, start, end in zip(operators, offsets[:-1], offsets[1:]):
        A[start:end, start:end] = op.matrix
        const[start:end] = op.constant
        for q, coupling in op.lower.items():
            qs, qe = offsets[q - 1], offsets[q]
            A[start:end, qs:qe] = coupling

    y0 = np.concatenate([by_order[n].values.ravel() for n in orders])
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    trajectory = integrate_affine(A, const, y0, times, tol=tol)

    out = []
    for ti, t in enumerate(times):
        frame = {}
        for n, start, end in zip(orders, offsets[:-1], offsets[1:]):
            frame[n] = MomentTensor(order=n, grid=grid,
                                    values=trajectory[ti, start:end].reshape((S,) * n),
                                    time=float(t))
        out.append(frame)
    return out


def integrate_orders(max_order: int, params: ModelParams, grid: TorusGrid,
                     times, tol: float = 1e-8) -> list[dict[int, MomentTensor]]:
    """Assemble and integrate orders 1..max_order from the model's initial law."""
    ops = [assemble(n, params, grid) for n in range(1, max_order + 1)]
    init = [initial_tensor(n, params, grid) for n in range(1, max_order + 1)]
    return integrate(ops, init, times, tol=tol)
