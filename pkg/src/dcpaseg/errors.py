"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class GeometryError(ValueError):
    """A patch size cannot be realized by the network's valid-convolution layout."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class DataError(Exception):
    """Missing, unreadable or inconsistent dataset files."""


class CheckpointError(Exception):
    """Base class for checkpoint decoding failures."""


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
