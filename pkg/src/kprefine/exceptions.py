"""Exception hierarchy shared across the package."""


class KPRefineError(Exception):
    """Base class for all package errors."""


class InvalidInputError(KPRefineError, ValueError):
    pass


class DegenerateGeometryError(KPRefineError, ArithmeticError):
    """Epipolar error denominator vanished."""


class AmbiguousCheiralityError(KPRefineError):
    pass


class EstimationError(KPRefineError):
    pass


class ConfigurationError(KPRefineError, ValueError):
    pass


class InvalidStateError(KPRefineError, RuntimeError):
    pass


class CorruptCheckpointError(KPRefineError):
    pass


class GenerationError(KPRefineError):
    pass


class NumericalError(KPRefineError, FloatingPointError):
    """Raised when training produces a non-finite loss."""


class NonFiniteError(InvalidInputError, NumericalError):
    """NaN or infinity reached a computation that requires finite values."""
