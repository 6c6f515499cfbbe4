"""Exception types shared across the package."""


class IPSLTError(Exception):
    """Base class for all package errors."""


class ShapeError(IPSLTError, ValueError):
    """Raised when tensor shapes are incompatible."""


class NumericError(IPSLTError, FloatingPointError):
    """Raised on NaN inputs or numerically undefined results."""


class UsageError(IPSLTError, ValueError):
    """Raised when an API is called with invalid arguments or in the wrong mode."""


class FormatError(IPSLTError, ValueError):
    """Raised when a dataset, config or checkpoint file cannot be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
