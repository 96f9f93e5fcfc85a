"""Exception types shared across the package."""


class GTOError(Exception):
    """Base class for all package errors."""


class ConfigError(GTOError, ValueError):
    """Invalid configuration value or combination."""


class ValidationError(GTOError, ValueError):
    """Input data violates a structural invariant."""


class DimensionError(GTOError, ValueError):
    """Tensor shapes are incompatible."""


class NumericError(GTOError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(GTOError, RuntimeError):
    """API called in the wrong state or order."""


class CoverageError(GTOError, ValueError):
    """A node is not covered by any partition."""


class ParseError(GTOError, ValueError):
    """Malformed binary container."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
