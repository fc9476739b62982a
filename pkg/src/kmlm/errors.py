"""Exception hierarchy shared by every kmlm module.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
everything else under KmlmError -> 4.
"""


class KmlmError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KmlmError):
    """A configuration value or combination of values is invalid."""


class DataError(KmlmError):
    """An input record or file is malformed; message carries location info."""


class ShapeError(KmlmError):
    """Tensor shapes are incompatible for the attempted operation."""


class NumericFault(KmlmError):
    """A NaN/Inf was produced while checked mode is enabled."""


class CheckpointError(DataError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    """The stored format version is not one this build can read."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was fully read."""


class CheckpointShapeError(CheckpointError):
    """A stored array's shape disagrees with the model configuration."""
