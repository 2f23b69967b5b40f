"""Exception hierarchy shared by every pipeline stage.

Each class name maps to one error kind that the CLI reports on its
single-line JSON error record.
"""


class SpineCadeError(Exception):
    """Base class; ``kind`` is the machine-readable error name."""

    @property
    def kind(self) -> str:
        return type(self).__name__.removesuffix("Error")


# volume-io
class MissingFileError(SpineCadeError, FileNotFoundError):
    pass


class MalformedHeaderError(SpineCadeError, ValueError):
    pass


class SizeMismatchError(SpineCadeError, ValueError):
    pass


class IoError(SpineCadeError, OSError):
    @property
    def kind(self) -> str:
        return "IoError"


class MalformedRowError(SpineCadeError, ValueError):
    pass


class OutOfBoundsError(SpineCadeError, ValueError):
    pass


class UnknownLabelError(SpineCadeError, ValueError):
    pass


# edgemap / orientation
class TooSmallError(SpineCadeError, ValueError):
    pass


class ShapeMismatchError(SpineCadeError, ValueError):
    pass


class DimMismatchError(SpineCadeError, ValueError):
    pass


class EmptyMaskError(SpineCadeError, ValueError):
    pass


# patch sampling / detection
class EmptyEdgeMapError(SpineCadeError, ValueError):
    pass


class NoPositivesError(SpineCadeError, ValueError):
    pass


# convnet
class SingleClassDatasetError(SpineCadeError, ValueError):
    pass


class VersionMismatchError(SpineCadeError, ValueError):
    pass


class ChecksumMismatchError(SpineCadeError, ValueError):
    pass


# evaluation / phantom / cli
class DegenerateLabelsError(SpineCadeError, ValueError):
    pass


class SpecTooSmallError(SpineCadeError, ValueError):
    pass


class ConfigInvalidError(SpineCadeError, ValueError):
    pass


class MissingUpstreamArtifactError(SpineCadeError, FileNotFoundError):
    pass


class RunLockedError(SpineCadeError, RuntimeError):
    pass
