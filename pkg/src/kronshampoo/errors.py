"""Exception hierarchy shared across the package."""


class KronShampooError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KronShampooError, ValueError):
    pass


class NumericalError(KronShampooError, ArithmeticError):
    """A computation could not produce a finite, well-defined result."""


class DegenerateInputError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class NotSymmetricError(NumericalError):
    pass


class NegativeSpectrumError(NumericalError):
    pass


class EnumerationLimitError(KronShampooError, ValueError):
    pass


class ConfigError(KronShampooError, ValueError):
    pass


class DataError(KronShampooError, ValueError):
    pass


class IdxFormatError(DataError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedStreamError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class EmptyResultError(DataError):
    pass
