"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad bbox, unknown method, ...)."""


class DataError(ValueError):
    """Invalid input data (malformed CSV row, out-of-range coordinate, empty dataset, ...)."""


class NumericalError(RuntimeError):
    """Numerical failure (non-positive-definite covariance, no posterior support, ...)."""
