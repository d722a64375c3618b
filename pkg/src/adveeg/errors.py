"""Exception types shared across the package."""


class DimensionError(ValueError):
    """An array does not have the extent an operation requires along some axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class UsageError(RuntimeError):
    """API misuse, e.g. running a backward pass twice on one forward context."""


class ConfigError(ValueError):
    """Invalid configuration; raised before any work is done."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout."""


class MetricError(ValueError):
    """A statistic is undefined for the given input."""


class NumericError(ArithmeticError):
    """Training produced a non-finite value."""
