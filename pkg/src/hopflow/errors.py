"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericError -> 4. Everything else is a programming error and escapes.
"""


class HopflowError(Exception):
    """Base class for errors raised by hopflow."""


class ConfigError(HopflowError):
    """Invalid configuration value or override."""


class DataFormatError(HopflowError):
    """Malformed, truncated or inconsistent input data."""


class NumericError(HopflowError):
    """Non-finite loss or gradient encountered during optimization."""
