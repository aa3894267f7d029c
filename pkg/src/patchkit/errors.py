"""Exception types shared across the package."""


class PatchkitError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PatchkitError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class ConfigError(PatchkitError):
    """Run configuration failed validation; carries the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DependencyError(PatchkitError):
    """A required upstream artifact is missing."""


class BudgetExceededError(PatchkitError):
    """An evaluation budget guard fired before completion."""


class ContractViolationError(PatchkitError):
    """A predictor returned something that is not a probability vector."""


class InvalidStateError(PatchkitError):
    """An operation was invoked on an object that is not ready for it."""


class NumericalFailureError(PatchkitError):
    """A computation produced non-finite values."""


class EmptyCohortError(PatchkitError):
    """No attribution maps survived the cohort mask."""


class UndefinedMetricError(PatchkitError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
