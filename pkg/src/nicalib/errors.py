"""Exception hierarchy.

Two branches matter to callers: :class:`ValidationError` for bad inputs
(CLI exit code 1) and :class:`NumericalError` for failures of the numerics
themselves (CLI exit code 2).
"""


class NicalibError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(NicalibError, ValueError):
    """Inputs violate a documented precondition."""


class DimensionMismatchError(ValidationError):
    pass


class NegativeWeightError(ValidationError):
    pass


class ResponseDomainError(ValidationError):
    """Response values outside the support of the family (e.g. y not in {0, 1})."""


class InvalidBoundsError(ValidationError):
    pass


class UnsupportedPopulationError(ValidationError):
    """Target population puts mass where the source population has none."""


class MetricError(ValidationError):
    """Incompatible metric / contrast / family combination."""


class IngestError(ValidationError):
    """Malformed input file. ``row`` is the 1-based line number, when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(NicalibError, ArithmeticError):
    """The computation itself failed."""


class ConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class SingularDesignError(NumericalError):
    pass


class SingularInformationError(NumericalError):
    pass


class DegeneratePropensityError(NumericalError):
    pass


class DegenerateStratificationError(NumericalError):
    pass


class BoundaryError(NumericalError):
    """A proportion sits at 0 or 1 where a logit is required."""


class UnstableBootstrapError(NumericalError):
    def __init__(self, failure_fraction: float, n_failed: int, n_total: int):
        self.failure_fraction = failure_fraction
        self.n_failed = n_failed
        self.n_total = n_total
        super().__init__(
            f"estimator failed in {n_failed}/{n_total} bootstrap replicates "
            f"({failure_fraction:.1%}), above the 5% limit"
        )
