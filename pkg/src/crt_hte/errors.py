"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class CrtHteError(Exception):
    """Base class for all package errors."""


class DesignError(CrtHteError, ValueError):
    """A trial design violates one of its invariants."""

    def __init__(self, message: str, violations: list[DesignError] | None = None):
        super().__init__(message)
        self.violations: list[DesignError] = violations if violations is not None else [self]


class EmptyDesign(DesignError):
    pass


class ArmCountOutOfRange(DesignError):
    pass


class NonIntegerSubgroupCount(DesignError):
    def __init__(self, cluster: int, subgroup: int, count: float):
        # 1-based indices, as reported to users
        self.cluster = cluster
        self.subgroup = subgroup
        self.count = count
        super().__init__(
            f"cluster {cluster}, subgroup {subgroup}: m*theta = {count:g} is not an integer"
        )


class InvalidSubgroups(DesignError):
    pass


class NonIntegerPatternEntry(DesignError):
    pass


class DegenerateAssignment(DesignError):
    pass


class UnequalArms(DesignError):
    pass


class TooFewClusters(DesignError):
    pass


class NotUnivariate(DesignError):
    pass


class SingularTheta(DesignError):
    pass


class DomainError(CrtHteError, ValueError):
    """Argument outside the mathematical domain of a distribution function."""


class DegenerateDenominator(CrtHteError, ValueError):
    pass


class EnumerationTooLarge(CrtHteError):
    """Exact enumeration would exceed the configured assignment cap."""


class SingularInformation(CrtHteError):
    """GLS information matrix is not invertible (collinear design)."""


class NoRootInBracket(CrtHteError):
    pass


class NonPositiveDiscriminant(CrtHteError):
    pass


class SimulationFailed(CrtHteError):
    """Every replicate of a simulation batch failed to fit."""
