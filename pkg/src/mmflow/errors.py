"""Exception hierarchy; the CLI maps each class to a distinct exit code."""


class MmflowError(Exception):
    exit_code = 1


class ContractError(MmflowError, ValueError):
    """A documented precondition or invariant was violated."""

    exit_code = 5


class ShapeError(ContractError):
    pass


class DTypeError(ContractError, TypeError):
    pass


class NumericError(MmflowError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 4


class DataIOError(MmflowError, OSError):
    exit_code = 3
