"""Exception hierarchy shared across the package."""


class OdeMergeError(Exception):
    """Base class for all library errors."""


class DimensionError(OdeMergeError, ValueError):
    """Parameter vectors of incompatible length."""


class NumericError(OdeMergeError, ArithmeticError):
    """A computation produced NaN or Inf."""


class DomainError(OdeMergeError, ValueError):
    """Argument outside the domain of a time-dependent quantity."""


class FormatError(OdeMergeError, ValueError):
    """Malformed or inconsistent checkpoint/config file."""


class TrainingError(OdeMergeError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ArgumentError(OdeMergeError, ValueError):
    """Invalid argument value."""
