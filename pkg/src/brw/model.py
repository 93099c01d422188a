"""Branching, death and immigration rates, and the scalars derived from them.

The offspring law is a finite table of splitting intensities b_n (n >= 2);
b_1 is the bookkeeping entry -(mu + sum b_n) that balances the generating
polynomial. All downstream moment formulas consume this module through
``derived_rates``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelSpec, TorusGrid, require_valid

CRITICALITY_TOL = 1e-12

DEFAULT_MAX_OFFSPRING = 10


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class BranchingLaw:
    """Death rate ``mu`` and splitting intensities ``b`` = {n: b_n, n >= 2}."""

    mu: float
    b: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mu < 0:
            raise ModelError(f"death rate must be nonnegative, got {self.mu}")
        clean = {}
        for n, rate in self.b.items():
            n = int(n)
            if n < 2:
                raise ModelError(f"splitting entries need n >= 2, got n={n}")
            if rate < 0 or not math.isfinite(rate):
                raise ModelError(f"b_{n} must be finite and nonnegative, got {rate}")
            if rate > 0:
                clean[n] = float(rate)
        object.__setattr__(self, "b", clean)

    @property
    def total_split_rate(self) -> float:
        return sum(self.b.values())

    @property
    def b1(self) -> float:
        return -(self.mu + self.total_split_rate)

    @property
    def beta(self) -> float:
        return sum((n - 1) * rate for n, rate in self.b.items())

    @property
    def max_offspring(self) -> int:
        return max(self.b, default=2)


@dataclass(frozen=True)
class DerivedRates:
    beta: float
    b1: float
    sum_sq: float        # sum (n-1)^2 b_n
    sum_fact: float      # sum (n-1)(n-2) b_n
    sum_choose2: float   # sum C(n,2) b_n


def derived_rates(law: BranchingLaw) -> DerivedRates:
    """Scalar reductions of the offspring table used by the moment formulas.

    Satisfies sum_choose2 == beta + sum_fact/2 exactly in the reals.
    """
    beta = law.beta
    sum_sq = sum((n - 1) ** 2 * r for n, r in law.b.items())
    sum_fact = sum((n - 1) * (n - 2) * r for n, r in law.b.items())
    sum_choose2 = sum(math.comb(n, 2) * r for n, r in law.b.items())
    return DerivedRates(beta=beta, b1=law.b1, sum_sq=sum_sq,
                        sum_fact=sum_fact, sum_choose2=sum_choose2)


def evaluate_infinitesimal_gf(law: BranchingLaw, s: float) -> float:
    """mu + b_1 s + sum b_n s^n; vanishes at s = 1, slope there is beta - mu."""
    return law.mu + law.b1 * s + sum(r * s**n for n, r in law.b.items())


def classify_criticality(law: BranchingLaw) -> str:
    """'subcritical' (mu > beta), 'critical', or 'supercritical' (beta > mu)."""
    gap = law.mu - law.beta
    scale = max(abs(law.mu), abs(law.beta), 1.0)
    if abs(gap) <= CRITICALITY_TOL * scale:
        return "critical"
    return "subcritical" if gap > 0 else "supercritical"


@dataclass(frozen=True)
class InitialCondition:
    """Per-site i.i.d. initial law: constant c, or Poisson with mean value."""

    kind: str = "const"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("const", "poisson"):
            raise ModelError(f"init kind must be 'const' or 'poisson', got {self.kind!r}")
        if self.value < 0:
            raise ModelError(f"init value must be nonnegative, got {self.value}")
        if self.kind == "const" and self.value != int(self.value):
            raise ModelError("const init value must be integer (it is a particle count)")

    def raw_moment(self, p: int) -> float:
        """E[n(0,x)^p] for p in 1..3."""
        v = self.value
        if self.kind == "const":
            return v**p
        if p == 1:
            return v
        if p == 2:
            return v**2 + v
        if p == 3:
            return v**3 + 3 * v**2 + v
        raise ModelError(f"raw moments implemented for p <= 3, got {p}")


@dataclass(frozen=True)
class ModelParams:
    """Constant-rate model: kernel + branching law + immigration + initial law."""

    kernel: KernelSpec
    law: BranchingLaw
    k: float
    init: InitialCondition = InitialCondition("const", 1.0)

    def __post_init__(self):
        if self.k < 0:
            raise ModelError(f"immigration rate must be nonnegative, got {self.k}")

    @property
    def criticality(self) -> str:
        return classify_criticality(self.law)

    def require_subcritical(self, need_immigration: bool = True) -> None:
        if self.criticality != "subcritical":
            raise ModelError(
                f"steady-state formulas need mu > beta, got mu={self.law.mu}, "
                f"beta={self.law.beta} ({self.criticality})"
            )
        if need_immigration and self.k <= 0:
            raise ModelError("steady-state formulas need immigration rate k > 0")

    def validate(self) -> None:
        require_valid(self.kernel)


def binary_example(kappa: float = 0.25, mu: float = 1.5, b2: float = 0.5,
                   k: float = 1.0, init: InitialCondition | None = None) -> ModelParams:
    """The workhorse configuration: 1-d simple random walk, binary splitting."""
    return ModelParams(
        kernel=KernelSpec.simple_random_walk(dimension=1, kappa=kappa),
        law=BranchingLaw(mu=mu, b={2: b2}),
        k=k,
        init=init if init is not None else InitialCondition("const", 1.0),
    )


@dataclass(frozen=True)
class SpatialModel:
    """Site-dependent rates on a torus, for the stability analysis.

    Tables are flat arrays in site-index order. ``v(x) = mu(x) - beta(x)``
    must be positive sitewise for the envelope machinery.
    """

    kernel: KernelSpec
    grid: TorusGrid
    mu: np.ndarray
    b: dict[int, np.ndarray]
    k: np.ndarray

    def __post_init__(self):
        S = self.grid.n_sites
        mu = np.asarray(self.mu, dtype=np.float64)
        k = np.asarray(self.k, dtype=np.float64)
        if mu.shape != (S,) or k.shape != (S,):
            raise ModelError(f"rate tables must have shape ({S},)")
        b = {}
        for n, tbl in self.b.items():
            n = int(n)
            if n < 2:
                raise ModelError(f"splitting entries need n >= 2, got n={n}")
            tbl = np.asarray(tbl, dtype=np.float64)
            if tbl.shape != (S,):
                raise ModelError(f"b_{n} table must have shape ({S},)")
            if np.any(tbl < 0):
                raise ModelError(f"b_{n} table has negative entries")
            b[n] = tbl
        for name, tbl in (("mu", mu), ("k", k)):
            if not np.all(np.isfinite(tbl)):
                raise ModelError(f"{name} table has non-finite entries")
            if np.any(tbl < 0):
                raise ModelError(f"{name} table has negative entries")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "b", b)

    @property
    def beta_table(self) -> np.ndarray:
        out = np.zeros(self.grid.n_sites)
        for n, tbl in self.b.items():
            out += (n - 1) * tbl
        return out

    @property
    def v_table(self) -> np.ndarray:
        return self.mu - self.beta_table

    @property
    def sum_sq_table(self) -> np.ndarray:
        out = np.zeros(self.grid.n_sites)
        for n, tbl in self.b.items():
            out += (n - 1) ** 2 * tbl
        return out

    @classmethod
    def constant(cls, params: ModelParams, grid: TorusGrid) -> "SpatialModel":
        S = grid.n_sites
        return cls(
            kernel=params.kernel,
            grid=grid,
            mu=np.full(S, params.law.mu),
            b={n: np.full(S, r) for n, r in params.law.b.items()},
            k=np.full(S, params.k),
        )

    def require_positive_gap(self) -> None:
        v = self.v_table
        if np.any(v <= 0):
            x = int(np.argmin(v))
            raise ModelError(f"v(x) = mu(x) - beta(x) must be positive; site {x} has {v[x]}")
