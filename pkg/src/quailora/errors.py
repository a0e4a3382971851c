"""Exception hierarchy shared by all quailora modules."""


class QuailoraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QuailoraError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class NumericError(QuailoraError, ArithmeticError):
    """A computation failed numerically (non-finite input, divergence, ...)."""


class SingularSystemError(NumericError):
    """A linear system stayed singular after all jitter escalations."""


class FormatError(QuailoraError, ValueError):
    """A serialized container is malformed."""


class DegenerateStatisticsError(QuailoraError, ValueError):
    """Statistics were requested from an empty or unusable accumulation."""
