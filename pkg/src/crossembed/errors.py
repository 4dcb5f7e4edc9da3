"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so library code raises them instead of
returning status values.
"""


class CrossEmbedError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossEmbedError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CrossEmbedError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(CrossEmbedError, ValueError):
    """Invalid configuration value."""


class DataError(CrossEmbedError, ValueError):
    """Malformed or inconsistent input data."""


class NumericError(CrossEmbedError, ArithmeticError):
    """Non-finite values appeared where they are not allowed (e.g. NaN loss)."""
