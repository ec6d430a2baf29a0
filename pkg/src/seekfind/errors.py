"""Exception hierarchy shared across the package."""


class SeekFindError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SeekFindError, ValueError):
    """Operand extents are incompatible.

    ``dim`` names the offending dimension (e.g. ``"channels"``) when known.
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class NumericError(SeekFindError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(SeekFindError, ValueError):
    """An invalid configuration value."""


class DataError(SeekFindError):
    """Malformed or missing input data."""


class WeightsFormatError(DataError):
    """Weights file does not start with the expected magic tag."""


class WeightsVersionError(WeightsFormatError):
    """Weights file was written with an unsupported format version."""


class WeightsIntegrityError(WeightsFormatError):
    """Weights file is truncated or its checksum does not validate."""


class WeightsShapeError(WeightsFormatError, ShapeError):
    """Stored parameter shapes do not match the target network."""

    def __init__(self, message, layer=None):
        ShapeError.__init__(self, message, dim="layer")
        self.layer = layer
