"""Domain types for cluster-randomized designs and the canonical size patterns."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    ArmCountOutOfRange,
    DesignError,
    EmptyDesign,
    InvalidSubgroups,
    NonIntegerPatternEntry,
    NonIntegerSubgroupCount,
)

INTEGRALITY_TOL = 1e-9

# one block of the simulation pattern, in units of the mean cluster size
PATTERN_BLOCK = (Fraction(1, 2),) * 4 + (Fraction(1), Fraction(5, 2), Fraction(2), Fraction(1, 2))


@dataclass(frozen=True)
class ClusterSizes:
    """Participants per cluster, m_1..m_I."""

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        sizes = tuple(self.sizes)
        if len(sizes) < 2:
            raise EmptyDesign(f"need at least 2 clusters, got {len(sizes)}")
        clean = []
        for i, m in enumerate(sizes, start=1):
            if isinstance(m, bool) or int(m) != m:
                raise EmptyDesign(f"cluster {i}: size {m!r} is not an integer")
            if m < 1:
                raise EmptyDesign(f"cluster {i}: size {m} must be positive")
            clean.append(int(m))
        object.__setattr__(self, "sizes", tuple(clean))

    def __len__(self) -> int:
        return len(self.sizes)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def mean_exact(self) -> Fraction:
        return Fraction(self.total, self.n_clusters)

    @property
    def mean(self) -> float:
        return self.total / self.n_clusters

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=float)

    def scaled(self, factor: int) -> ClusterSizes:
        return ClusterSizes(tuple(m * factor for m in self.sizes))


@dataclass(frozen=True)
class SubgroupSpec:
    """Proportions theta_1..theta_p of the non-reference subgroups."""

    theta: tuple[float, ...]

    def __post_init__(self) -> None:
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        if not theta:
            raise InvalidSubgroups("theta must contain at least one proportion")
        for l, t in enumerate(theta, start=1):
            if not 0.0 < t < 1.0:
                raise InvalidSubgroups(f"theta[{l}] = {t} must lie strictly in (0, 1)")
        if sum(theta) >= 1.0:
            raise InvalidSubgroups(f"sum(theta) = {sum(theta)} leaves no reference subgroup")
        object.__setattr__(self, "theta", theta)

    @property
    def p(self) -> int:
        return len(self.theta)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)


@dataclass(frozen=True)
class TrialDesign:
    clusters: ClusterSizes
    i1: int
    subgroups: SubgroupSpec
    sigma_eps: float = 1.0

    def __post_init__(self) -> None:
        if not isinstance(self.clusters, ClusterSizes):
            object.__setattr__(self, "clusters", ClusterSizes(tuple(self.clusters)))
        if not isinstance(self.subgroups, SubgroupSpec):
            object.__setattr__(self, "subgroups", SubgroupSpec(tuple(np.atleast_1d(self.subgroups))))
        if not self.sigma_eps > 0:
            raise DesignError(f"sigma_eps must be positive, got {self.sigma_eps}")

    @property
    def n_clusters(self) -> int:
        return self.clusters.n_clusters

    @property
    def i0(self) -> int:
        return self.n_clusters - self.i1

    @property
    def m_bar(self) -> float:
        return self.clusters.mean

    @property
    def theta(self) -> np.ndarray:
        return self.subgroups.as_array()

    @property
    def p(self) -> int:
        return self.subgroups.p

    @property
    def balanced(self) -> bool:
        return self.i1 == self.i0


@dataclass(frozen=True)
class ModelParams:
    """Fixed effects and ICC for the data-generating mixed model."""

    beta1: float
    beta2: float
    beta3: tuple[float, ...]
    beta4: tuple[float, ...]
    rho: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta3", tuple(float(b) for b in np.atleast_1d(self.beta3)))
        object.__setattr__(self, "beta4", tuple(float(b) for b in np.atleast_1d(self.beta4)))
        if len(self.beta3) != len(self.beta4):
            raise ValueError("beta3 and beta4 must have the same length")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")

    def sigma2_gamma(self, sigma_eps: float) -> float:
        return sigma_eps**2 * self.rho / (1.0 - self.rho)

    def sigma2_y_given_x(self, sigma_eps: float) -> float:
        return sigma_eps**2 / (1.0 - self.rho)

    def with_rho(self, rho: float) -> ModelParams:
        return ModelParams(self.beta1, self.beta2, self.beta3, self.beta4, rho)

    def with_beta4(self, beta4: Sequence[float] | float) -> ModelParams:
        return ModelParams(self.beta1, self.beta2, self.beta3, tuple(np.atleast_1d(beta4)), self.rho)


@dataclass(frozen=True)
class PsiEstimate:
    """Randomization inflation factor E[1/(Wbar(1-Wbar))] and how it was obtained."""

    value: float
    method: str
    cv2: float
    kurtosis: float
    assignments_evaluated: int
    std_error: float | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __float__(self) -> float:
        return float(self.value)


def design_violations(design: TrialDesign, *, require_integral: bool = True) -> list[DesignError]:
    """Collect every invariant violation instead of stopping at the first."""
    problems: list[DesignError] = []
    n = design.n_clusters
    if not 1 <= design.i1 <= n - 1:
        problems.append(
            ArmCountOutOfRange(f"i1 = {design.i1} must lie in [1, {n - 1}] for {n} clusters")
        )
    if require_integral:
        for i, m in enumerate(design.clusters.sizes, start=1):
            for l, t in enumerate(design.subgroups.theta, start=1):
                count = m * t
                if abs(count - round(count)) > INTEGRALITY_TOL:
                    problems.append(NonIntegerSubgroupCount(i, l, count))
    return problems


def validate_design(design: TrialDesign, *, require_integral: bool = True) -> TrialDesign:
    """Return ``design`` unchanged if valid, otherwise raise the first violation.

    The raised error carries every violation found in ``.violations``.
    """
    problems = design_violations(design, require_integral=require_integral)
    if problems:
        first = problems[0]
        first.violations = problems
        raise first
    return design


def subgroup_counts(design: TrialDesign) -> np.ndarray:
    """Integer matrix of m_i * theta_l, shape (I, p)."""
    validate_design(design)
    counts = np.outer(design.clusters.as_array(), design.theta)
    return np.rint(counts).astype(np.int64)


def build_simulation_pattern(q: int, m_bar: float | int | Fraction) -> ClusterSizes:
    """Sizes 1_q kron [m/2, m/2, m/2, m/2, m, 5m/2, 2m, m/2] for mean size m."""
    if int(q) != q or q < 1:
        raise ValueError(f"q must be a positive integer, got {q!r}")
    m = Fraction(m_bar)
    block = []
    for factor in PATTERN_BLOCK:
        entry = factor * m
        if entry.denominator != 1 or entry < 1:
            raise NonIntegerPatternEntry(
                f"m_bar = {m_bar} gives pattern entry {float(entry):g}; use an even integer"
            )
        block.append(int(entry))
    return ClusterSizes(tuple(block) * int(q))


def empirical_cv2(sizes: ClusterSizes | Sequence[float]) -> float:
    m = np.asarray(sizes.sizes if isinstance(sizes, ClusterSizes) else sizes, dtype=float)
    return float(np.sum(m**2) / (m.size * m.mean() ** 2) - 1.0)


def design_from_dict(doc: dict[str, Any]) -> TrialDesign:
    missing = [k for k in ("sizes", "i1", "theta", "sigma_eps") if k not in doc]
    if missing:
        raise DesignError(f"design document is missing keys: {', '.join(missing)}")
    return TrialDesign(
        clusters=ClusterSizes(tuple(doc["sizes"])),
        i1=int(doc["i1"]),
        subgroups=SubgroupSpec(tuple(np.atleast_1d(doc["theta"]))),
        sigma_eps=float(doc["sigma_eps"]),
    )


def design_to_dict(design: TrialDesign) -> dict[str, Any]:
    return {
        "sizes": list(design.clusters.sizes),
        "i1": design.i1,
        "theta": list(design.subgroups.theta),
        "sigma_eps": design.sigma_eps,
    }


def load_design(path: str | Path) -> TrialDesign:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return design_from_dict(doc)


def preset_names() -> list[str]:
    from importlib import resources

    files = resources.files("crt_hte.presets").iterdir()
    return sorted(f.name[:-5] for f in files
                  if f.name.endswith(".json") and f.name != "published_tables.json")


def load_preset(name: str) -> TrialDesign:
    from importlib import resources

    if name not in preset_names():
        raise DesignError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = resources.files("crt_hte.presets").joinpath(f"{name}.json").read_text("utf-8")
    return design_from_dict(json.loads(text))
