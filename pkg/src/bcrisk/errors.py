"""Exception types shared across the package."""


class BcriskError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(BcriskError):
    """An input violates a documented invariant or contract."""


class ParseError(ValidationError):
    """A file or row could not be parsed; message names the location."""


class ContractError(ValidationError):
    """Caller supplied inputs inconsistent with the requested operation."""


class EstimationError(BcriskError):
    """An estimator is undefined on the supplied data (e.g. no events)."""


class ReliabilityError(EstimationError):
    """Too many degenerate bootstrap resamples to trust the interval."""


class ConvergenceError(BcriskError):
    """An iterative fit failed to converge within its iteration budget."""


class NumericalError(BcriskError):
    """A non-finite intermediate value was produced."""


class FormatError(BcriskError):
    """A binary or structured file does not match its documented layout."""
