"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range or inconsistent."""


class DataError(ValueError):
    """Input data violates a documented precondition (e.g. bad label)."""


class FormatError(ValueError):
    """A serialized artifact does not match its documented byte layout."""


class ResampleError(ConfigError):
    """Feature-map resampling would need a non-integer scale factor."""


class GraphUsageError(RuntimeError):
    """The autograd graph was used in an unsupported way (e.g. double backward)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
