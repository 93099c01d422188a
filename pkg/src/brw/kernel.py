"""Symmetric lattice jump kernels and periodic grids.

A jump kernel is a finite probability table over nonzero integer offsets,
symmetric under negation. Everything downstream consumes it through this
module: validation, the difference generator, the cosine spectral symbol,
and torus-wrapped convolution powers. The generator is stored without the
jump intensity ``kappa``; callers that want the rate-scaled operator
multiply explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sympy import Matrix
from sympy.matrices.normalforms import smith_normal_form

Offset = tuple[int, ...]

NORMALIZATION_TOL = 1e-12


class KernelError(ValueError):
    """Raised when an operation requires a valid kernel and got none."""


@dataclass(frozen=True)
class KernelSpec:
    """Finite symmetric jump distribution with jump intensity ``kappa``.

    ``entries`` holds (offset, weight) pairs for nonzero offsets only; the
    diagonal convention (weight -1 at the origin) is realized by the
    ``-f(x)`` term of the generator, never stored.
    """

    dimension: int
    entries: tuple[tuple[Offset, float], ...]
    kappa: float

    @classmethod
    def from_pairs(cls, pairs, kappa: float, dimension: int | None = None) -> "KernelSpec":
        entries = tuple((tuple(int(c) for c in off), float(w)) for off, w in pairs)
        if dimension is None:
            if not entries:
                raise KernelError("cannot infer dimension from empty entries")
            dimension = len(entries[0][0])
        return cls(dimension=dimension, entries=entries, kappa=float(kappa))

    @classmethod
    def simple_random_walk(cls, dimension: int = 1, kappa: float = 1.0) -> "KernelSpec":
        """Nearest-neighbour walk with weight 1/(2d) per direction."""
        w = 1.0 / (2 * dimension)
        pairs = []
        for axis in range(dimension):
            for sign in (+1, -1):
                off = [0] * dimension
                off[axis] = sign
                pairs.append((tuple(off), w))
        return cls.from_pairs(pairs, kappa=kappa, dimension=dimension)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([off for off, _ in self.entries], dtype=np.int64).reshape(
            len(self.entries), self.dimension
        )

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries], dtype=np.float64)

    @property
    def support_radius(self) -> int:
        if not self.entries:
            return 0
        return int(np.max(np.abs(self.offsets)))

    def weight_of(self, offset: Offset) -> float:
        """Table lookup with the diagonal convention: weight(0) = -1."""
        off = tuple(int(c) for c in offset)
        if all(c == 0 for c in off):
            return -1.0
        for stored, w in self.entries:
            if stored == off:
                return w
        return 0.0


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = field(default=())

    def __bool__(self) -> bool:
        return self.ok


def _span_is_full_lattice(offsets: np.ndarray, dimension: int) -> bool:
    # Integer span equals Z^d iff the Smith normal form of the offset matrix
    # has d invariant factors, all equal to 1.
    if offsets.shape[0] < dimension:
        return False
    snf = smith_normal_form(Matrix(offsets.tolist()))
    diag = [abs(snf[i, i]) for i in range(min(snf.shape))]
    nonzero = [d for d in diag if d != 0]
    return len(nonzero) >= dimension and all(d == 1 for d in nonzero[:dimension])


def validate_kernel(spec: KernelSpec) -> ValidationReport:
    """Check symmetry, normalization, positivity, and lattice-span irreducibility.

    Report-style: never raises, returns the list of violated invariants.
    """
    violations: list[str] = []
    if not spec.entries:
        return ValidationReport(False, ("entries empty",))
    if spec.kappa <= 0:
        violations.append(f"kappa must be positive, got {spec.kappa}")

    table: dict[Offset, float] = {}
    for off, w in spec.entries:
        if len(off) != spec.dimension:
            violations.append(f"offset {off} has wrong dimension (expected {spec.dimension})")
            continue
        if all(c == 0 for c in off):
            violations.append("zero offset present (the origin weight is implicit)")
            continue
        if off in table:
            violations.append(f"duplicate offset {off}")
        if not (0.0 < w <= 1.0):
            violations.append(f"weight {w} at {off} outside (0, 1]")
        table[off] = w

    for off, w in table.items():
        neg = tuple(-c for c in off)
        if neg not in table:
            violations.append(f"asymmetric: {off} stored without {neg}")
        elif table[neg] != w:
            violations.append(f"asymmetric: weight {w} at {off} vs {table[neg]} at {neg}")

    total = sum(table.values())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        violations.append(f"weights sum to {total!r}, expected 1 within {NORMALIZATION_TOL}")

    if table:
        offs = np.array(sorted(table.keys()), dtype=np.int64).reshape(-1, spec.dimension)
        if not _span_is_full_lattice(offs, spec.dimension):
            violations.append("reducible: integer span of support is a proper sublattice")

    return ValidationReport(not violations, tuple(violations))


def require_valid(spec: KernelSpec) -> None:
    report = validate_kernel(spec)
    if not report.ok:
        raise KernelError("invalid kernel: " + "; ".join(report.violations))


@dataclass(frozen=True)
class TorusGrid:
    """Periodic box with row-major site indexing over 0..L_i-1 per axis."""

    sides: tuple[int, ...]

    def __post_init__(self):
        if not self.sides or any(int(s) < 1 for s in self.sides):
            raise ValueError(f"all side lengths must be >= 1, got {self.sides}")
        object.__setattr__(self, "sides", tuple(int(s) for s in self.sides))

    @property
    def dimension(self) -> int:
        return len(self.sides)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.sides))

    def supports(self, spec: KernelSpec) -> bool:
        """True when distinct kernel offsets map to distinct torus displacements."""
        return spec.dimension == self.dimension and all(
            L > 2 * spec.support_radius for L in self.sides
        )

    def require_supports(self, spec: KernelSpec) -> None:
        if not self.supports(spec):
            raise ValueError(
                f"grid sides {self.sides} too small for kernel support radius "
                f"{spec.support_radius} (need every side > twice the radius)"
            )

    def index_of(self, coords) -> int:
        idx = 0
        for c, L in zip(coords, self.sides):
            idx = idx * L + (int(c) % L)
        return idx

    def coords_of(self, index: int) -> Offset:
        coords = []
        for L in reversed(self.sides):
            coords.append(index % L)
            index //= L
        return tuple(reversed(coords))

    def all_coords(self) -> np.ndarray:
        """(n_sites, d) array of site coordinates in index order."""
        grids = np.meshgrid(*[np.arange(L) for L in self.sides], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)

    def shift_index_table(self, offsets: np.ndarray) -> np.ndarray:
        """(n_sites, n_offsets) table: site index reached from x by each offset."""
        coords = self.all_coords()  # (S, d)
        sides = np.array(self.sides, dtype=np.int64)
        shifted = (coords[:, None, :] + offsets[None, :, :]) % sides
        strides = np.ones(self.dimension, dtype=np.int64)
        for axis in range(self.dimension - 2, -1, -1):
            strides[axis] = strides[axis + 1] * self.sides[axis + 1]
        return (shifted * strides).sum(axis=2)

    def displacement_index(self, x: int, y: int) -> int:
        """Site index of the wrapped displacement y - x."""
        cx, cy = self.coords_of(x), self.coords_of(y)
        return self.index_of(tuple(b - a for a, b in zip(cx, cy)))

    def frequencies(self) -> np.ndarray:
        """(n_sites, d) array of DFT angles 2*pi*j_i/L_i in index order."""
        axes = [2.0 * np.pi * np.arange(L) / L for L in self.sides]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def reshape(self, flat: np.ndarray) -> np.ndarray:
        return np.asarray(flat).reshape(self.sides)


def fourier_symbol(spec: KernelSpec, theta) -> float:
    """Cosine symbol: sum over offsets of cos(theta . z) * a(z).

    Real by symmetry; equals 1 at theta = 0 and lies in [-1, 1].
    """
    th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    return float(np.sum(spec.weights * np.cos(spec.offsets @ th)))


def symbol_on_grid(spec: KernelSpec, grid: TorusGrid) -> np.ndarray:
    """Symbol evaluated at every torus DFT frequency, flat in site-index order."""
    theta = grid.frequencies()  # (S, d)
    return np.cos(theta @ spec.offsets.T) @ spec.weights


def kernel_table(spec: KernelSpec, grid: TorusGrid) -> np.ndarray:
    """Jump weights scattered onto torus sites (wrap collisions accumulate)."""
    table = np.zeros(grid.n_sites)
    for off, w in spec.entries:
        table[grid.index_of(off)] += w
    return table


def convolution_power(spec: KernelSpec, n: int, grid: TorusGrid) -> np.ndarray:
    """n-fold torus-wrapped convolution of the jump table with itself.

    Each power is again a probability table on the torus; on grids large
    relative to n times the support radius it approximates the free-lattice
    walk distribution.
    """
    require_valid(spec)
    if n < 1:
        raise ValueError(f"convolution power needs n >= 1, got {n}")
    base = kernel_table(spec, grid)
    shift = grid.shift_index_table(spec.offsets)  # (S, n_off)
    weights = spec.weights
    out = base
    for _ in range(n - 1):
        nxt = np.zeros_like(out)
        # (a * out)(u) = sum_z a(z) out(u - z); symmetry lets us use u + z
        for j in range(weights.size):
            nxt += weights[j] * out[shift[:, j]]
        out = nxt
    return out


def generator_matrix(spec: KernelSpec, grid: TorusGrid) -> np.ndarray:
    """Dense kappa-free difference generator: (Gf)(x) = sum_z a(z)(f(x+z) - f(x))."""
    S = grid.n_sites
    G = -float(np.sum(spec.weights)) * np.eye(S)
    shift = grid.shift_index_table(spec.offsets)
    for j, w in enumerate(spec.weights):
        G[np.arange(S), shift[:, j]] += w
    return G


def apply_generator(spec: KernelSpec, f, grid: TorusGrid, x: int) -> float:
    """Pointwise kappa-free generator at site x; callers scale by kappa."""
    f = np.asarray(f, dtype=np.float64)
    shift = grid.shift_index_table(spec.offsets)
    return float(np.sum(spec.weights * (f[shift[x]] - f[x])))


def apply_generator_table(spec: KernelSpec, f, grid: TorusGrid) -> np.ndarray:
    """Generator applied at every site at once."""
    f = np.asarray(f, dtype=np.float64)
    shift = grid.shift_index_table(spec.offsets)
    out = -float(np.sum(spec.weights)) * f
    for j, w in enumerate(spec.weights):
        out = out + w * f[shift[:, j]]
    return out
