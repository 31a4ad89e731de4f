"""Exception hierarchy shared across matchcal modules."""

from __future__ import annotations


class MatchcalError(Exception):
    """Base class for every error raised by this package."""


class DataError(MatchcalError):
    """Invalid input data: ingestion failures, shape/value violations."""


class ZeroVarianceError(DataError):
    """A covariate column is constant where a nonzero variance is required."""

    def __init__(self, column: str):
        super().__init__(f"column {column!r} has zero variance")
        self.column = column


class InsufficientGroupError(DataError):
    """A treatment or control group is too small for the requested operation."""


class SingularDesignError(MatchcalError):
    """The regression design (or a derived matrix) is rank deficient.

    ``condition`` carries the reciprocal condition estimate when one was
    computed before failing.
    """

    def __init__(self, message: str, condition: float | None = None):
        if condition is not None:
            message = f"{message} (reciprocal condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class SeparationError(MatchcalError):
    """Logistic fit diverged: treatment groups are (quasi-)completely separated."""


class EmptyMatchError(MatchcalError):
    """Matching retained no usable pairs."""


class UndefinedRatioError(MatchcalError):
    """A relative metric has an exactly-zero denominator."""


class AbsorbedTermError(MatchcalError):
    """A candidate omitted term lies in the span of the included design."""

    def __init__(self, label: str):
        super().__init__(
            f"term {label!r} is absorbed by the included design and induces no bias"
        )
        self.label = label


class ConfigError(MatchcalError):
    """Invalid run configuration."""
