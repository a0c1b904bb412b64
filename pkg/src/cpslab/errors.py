"""Exception hierarchy shared by all cpslab modules."""


class CpsLabError(Exception):
    """Base class for every error raised by cpslab."""


class DimensionError(CpsLabError):
    """Tensor/array shapes are incompatible; the message names the offending axes."""


class ArgumentError(CpsLabError):
    """A scalar argument violates its contract (bad stride, factor, seed, ...)."""


class ConfigError(CpsLabError):
    """A configuration object is invalid as a whole."""


class DataError(CpsLabError):
    """Label or dataset contents are out of range."""


class EvaluationError(CpsLabError):
    """A metric is undefined for the accumulated data (e.g. no classes present)."""
