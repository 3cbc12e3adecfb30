"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError (and argparse usage
errors) exit 1, NumericalError exits 2.
"""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent with the data."""


class DimensionError(ValueError):
    """An array argument has the wrong length or shape."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs (e.g. one class only)."""
