"""Exception hierarchy shared across the package.

Each family maps to a distinct CLI exit code (see ``prwn.cli``).
"""


class PRWNError(Exception):
    exit_code = 1


class ConfigError(PRWNError, ValueError):
    exit_code = 3


class DimensionError(PRWNError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 3


class ContractError(PRWNError, ValueError):
    """A precondition of an operation does not hold."""

    exit_code = 3


class DataError(ContractError):
    pass


class CapacityError(PRWNError, ValueError):
    """Not enough classes or points to build the requested episode."""

    exit_code = 4


class DegenerateError(PRWNError, ValueError):
    """A softmax row or walk graph has no admissible entry."""

    exit_code = 5


class NumericError(PRWNError, ArithmeticError):
    exit_code = 5


class StorageError(PRWNError, OSError):
    exit_code = 6
