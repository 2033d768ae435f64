"""Exception types raised across the package."""


class DfqError(Exception):
    """Base class for every error this package raises on purpose."""


class DegenerateRange(DfqError, ValueError):
    """A tensor with max |x| = 0 has no usable quantization scale."""


class UnsupportedLayer(DfqError, TypeError):
    pass


class InvalidClassCount(DfqError, ValueError):
    pass


class ShapeMismatch(DfqError, ValueError):
    pass


class ContentMismatch(DfqError, ValueError):
    """Two intervened batches were not generated from the same content draw."""


class NoBatchNorm(DfqError, ValueError):
    pass


class LabelOutOfRange(DfqError, ValueError):
    pass


class UnknownArchitecture(DfqError, KeyError):
    pass


class DatasetNotFound(DfqError, FileNotFoundError):
    pass


class DataBoundaryViolation(DfqError, RuntimeError):
    """A dataset file was opened while data-free training was in progress."""


class EmptyEvalSet(DfqError, ValueError):
    pass


class NonFiniteLoss(DfqError, FloatingPointError):
    pass


class DegenerateActivations(DfqError, ValueError):
    pass


class ConfigError(DfqError, ValueError):
    """Base for configuration problems (CLI exit code 1)."""


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    pass
