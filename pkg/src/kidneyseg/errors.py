"""Exception hierarchy for the segmentation pipeline."""


class KidneySegError(Exception):
    """Base class for all pipeline errors."""


class UnsupportedFormat(KidneySegError):
    """File uses a datatype, compression, or layout outside the supported subset."""


class CorruptFile(KidneySegError):
    """File header and payload are inconsistent (e.g. truncated data)."""


class UnsupportedShape(KidneySegError):
    """Volume dimensionality outside the supported 3-D subset."""


class IoError(KidneySegError):
    """Underlying I/O failure while reading or writing a file."""


class InvalidRange(KidneySegError):
    """Numeric range argument is empty or inverted."""


class InvalidMode(KidneySegError):
    """Interpolation mode is incompatible with the volume kind."""


class ShapeError(KidneySegError):
    """Tensor or network shapes are incompatible."""


class InvalidRate(KidneySegError):
    """Dropout rate outside [0, 1)."""


class GridError(KidneySegError):
    """Patch grid does not fit the volume."""


class LabelError(KidneySegError):
    """Label map contains values outside the known class set."""


class AlignmentError(KidneySegError):
    """Two volumes or patches do not share the required geometry."""


class InvalidK(KidneySegError):
    """Top-k fraction outside (0, 1]."""


class NumericsError(KidneySegError):
    """Non-finite values encountered where finite math is required."""


class ConfigError(KidneySegError):
    """Configuration file or key is invalid."""


class GeometryError(KidneySegError):
    """Synthetic shape does not fit inside the requested volume."""


class StatError(KidneySegError):
    """Statistical routine received an empty or degenerate input."""


class MissingCase(KidneySegError):
    """Prediction/reference case pairing is incomplete."""
