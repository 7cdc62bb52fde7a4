"""Exception hierarchy shared across the package."""


class MmmlError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MmmlError):
    """Shapes or extents are incompatible for the requested operation."""


class ContractError(MmmlError):
    """A documented precondition was violated by the caller."""


class EmptyPoolError(ContractError):
    """Pooling was requested over a mask with no valid positions."""


class EmptyAttentionError(ContractError):
    """Attention was requested against fully masked keys/values."""


class ConfigError(MmmlError):
    """A configuration object holds inconsistent or invalid values."""


class NumericError(MmmlError):
    """A non-finite value appeared where a finite number is required."""


class FormatError(MmmlError):
    """A serialized artifact (model file, dataset file) is malformed."""


class ParseError(FormatError):
    """A text input line could not be parsed; message carries the line number."""


class UndefinedMetricError(MmmlError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""
