"""Exception hierarchy shared by every kdlab module."""


class KDLabError(Exception):
    """Base class for all library errors."""


class DimensionError(KDLabError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ParameterError(KDLabError, ValueError):
    """A scalar argument or spec field is out of its valid range."""


class NumericError(KDLabError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class ConfigError(KDLabError, ValueError):
    """An experiment or run configuration is inconsistent or incomplete."""


class DataError(KDLabError, ValueError):
    """Dataset contents violate a precondition (empty set, bad label)."""


class FormatError(KDLabError, ValueError):
    """A file on disk does not follow its declared binary or text layout."""


class ReportError(KDLabError):
    """A record directory is missing pieces a report needs."""
