"""Exception types raised across the package."""


class EptomoError(Exception):
    """Base class for package errors."""


class DataError(EptomoError, ValueError):
    """Input data is malformed or violates a precondition."""


class NumericalError(EptomoError, ArithmeticError):
    """A numerical routine failed to converge or hit a degenerate case."""


class NoPeakError(DataError):
    """No coincidence peak stands out of the background."""


class NoFringeError(DataError):
    """No dominant spatial frequency was found in a pattern."""
