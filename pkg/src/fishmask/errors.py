"""Exception types shared across the package.

The CLI maps each class to a distinct exit code.
"""


class ConfigError(ValueError):
    """Invalid experiment, model or training configuration."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericError(ArithmeticError):
    """Non-finite values appeared during training."""


class ChainError(ValueError):
    """A checkpoint chain is broken, reordered or corrupt."""
