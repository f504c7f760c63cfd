"""Exception hierarchy shared by every stalign module."""


class STAlignError(Exception):
    """Base class for all library errors."""


class ConfigError(STAlignError, ValueError):
    """Invalid configuration value or argument combination."""


class DataError(STAlignError, ValueError):
    """Input data is missing, inconsistent or non-finite."""


class FormatError(DataError):
    """A file does not conform to its binary or text format."""


class IngestionError(DataError):
    """Spot identifiers disagree between input files."""


class ShapeError(STAlignError, ValueError):
    """Tensor or matrix extents are incompatible."""


class NumericalError(STAlignError, ArithmeticError):
    """Training diverged or a gradient check failed."""


class VersionError(FormatError):
    """A file was written by an incompatible format version."""
