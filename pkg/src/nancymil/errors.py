"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI lives in cli.main: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class NancyMilError(Exception):
    pass


class UsageError(NancyMilError):
    """Bad invocation: unknown flag values, missing arguments."""


class DataError(NancyMilError):
    """Malformed or inconsistent input data (files, dimensions, labels)."""


class NumericalError(NancyMilError):
    """Non-finite values or undefined numerical results."""
