"""Exception hierarchy shared by all modules."""


class LagCouplingError(Exception):
    """Base class for every error raised by this package."""


class FormatError(LagCouplingError):
    """A file does not follow the expected binary or text layout."""


class DataError(LagCouplingError):
    """Input values are malformed (non-finite, wrong shape, ...)."""


class IoError(LagCouplingError, OSError):
    """Reading or writing a file failed."""


class ConfigError(LagCouplingError):
    """A configuration document is missing fields or holds bad values."""


class ParamError(LagCouplingError, ValueError):
    """A function argument is outside its admissible range."""


class LengthError(ParamError):
    """A sequence is too short for the requested operation."""


class NumericalError(LagCouplingError, ArithmeticError):
    """A matrix lost positive definiteness or a solve broke down."""
