"""Exception hierarchy shared by all dpcc modules."""


class DpccError(Exception):
    """Base class for every error raised by the codec."""


class CoordinateRangeError(DpccError, ValueError):
    """A coordinate falls outside the voxel grid of its scale."""


class EmptyInputError(DpccError, ValueError):
    pass


class ShapeError(DpccError, ValueError):
    """Channel counts or row counts do not line up."""


class DecodeError(DpccError):
    """A byte stream is truncated, malformed or inconsistent."""


class UsageError(DpccError, RuntimeError):
    pass


class CheckpointMismatchError(DecodeError):
    """Bitstream was produced with a different model checkpoint."""


class PlyFormatError(DpccError, ValueError):
    pass
