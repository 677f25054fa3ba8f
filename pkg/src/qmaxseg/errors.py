"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration (bad sizes, inconsistent flags, ...)."""


class DataError(ValueError):
    """Malformed or missing dataset content."""


class NumericError(RuntimeError):
    """Non-finite values encountered during optimization or inference."""
