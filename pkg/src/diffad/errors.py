"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, DataError 2,
NumericError 3.
"""


class DataError(ValueError):
    """Input data violates a format or alignment contract."""


class NumericError(ArithmeticError):
    """A numeric operation produced NaN/Inf or otherwise failed."""
