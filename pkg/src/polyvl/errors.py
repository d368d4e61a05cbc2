"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
DataError exits 2, NumericalError exits 3.
"""


class DataError(Exception):
    """Malformed or inconsistent input data (files, splits, lexicons)."""


class ConfigError(Exception):
    """Invalid configuration value or unknown configuration key."""


class NumericalError(Exception):
    """Non-finite loss or other numerical failure during training."""
