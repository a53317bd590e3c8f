"""
Exception types raised by the TopoTTA desk toolkit.

Every failure the library reports maps onto one of these classes so the
command line can translate it into a stable exit code.
"""


class TopoTTAError(Exception):
    """Base class for all errors raised by this package.

    Attributes:
        message (str): Human readable description of the failure.
    """

    def __init__(self, message):
        super().__init__(message)
        self.message = message


class InvalidArgumentError(TopoTTAError, ValueError):
    """Raised when an operation receives arguments that violate its contract."""

    pass


class InvalidStateError(TopoTTAError):
    """Raised when an object is in a state that forbids the requested operation."""

    pass


class NumericalError(TopoTTAError, ArithmeticError):
    """Raised when a computation produces NaN or infinite values."""

    pass


class TrainingDivergedError(NumericalError):
    """Raised when source-domain training produces a non-finite loss."""

    pass


class AdaptationDivergedError(NumericalError):
    """Raised when a test-time adaptation step produces non-finite values."""

    pass


class DataIOError(TopoTTAError, OSError):
    """Raised when a file or directory cannot be read or written.

    Attributes:
        path (str): The offending path.
    """

    def __init__(self, message, path):
        super().__init__(f"{message}: {path}")
        self.path = str(path)
