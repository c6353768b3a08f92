"""Exception hierarchy shared across the package."""


class SurgeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SurgeError, ValueError):
    """An array or tensor has the wrong rank, size or channel count."""


class PreconditionError(SurgeError, ValueError):
    """An input violates an operation's documented precondition."""


class ConfigurationError(SurgeError, ValueError):
    """A configuration value or combination of values is invalid."""


class DecodeError(SurgeError, OSError):
    """An image file could not be read or decoded."""


class FormatError(SurgeError, ValueError):
    """A file decoded but uses an unsupported format (bit depth, version...)."""


class IntegrityError(SurgeError, ValueError):
    """A checkpoint file is truncated or its content digest does not match."""


class NumericalDivergenceError(SurgeError, FloatingPointError):
    """A NaN or infinity appeared during an iterative computation."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
