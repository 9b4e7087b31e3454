"""Exception hierarchy. Each family maps to a distinct CLI exit code."""

from __future__ import annotations


class DeltaLabError(Exception):
    exit_code = 1


class ConfigError(DeltaLabError, ValueError):
    """Invalid configuration, flags, or arguments."""

    exit_code = 2


class DataError(DeltaLabError, ValueError):
    """Inputs that are malformed, mismatched, or missing."""

    exit_code = 3


class NumericError(DeltaLabError, ArithmeticError):
    """Non-finite values or failed numerical routines."""

    exit_code = 4


class DimensionError(DataError):
    pass


class BudgetError(ConfigError):
    pass


class HashMismatchError(DataError):
    pass


class CorruptFileError(DataError):
    pass
