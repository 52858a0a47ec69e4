"""Exception types raised across the package."""


class DeskReconError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(DeskReconError):
    """Two-view configuration cannot determine a 3D point."""


class BehindCamera(DeskReconError):
    """A point does not project into a camera's image."""


class NoVisibleOverlap(DeskReconError):
    """A correspondence source produced zero pairs."""


class EmptyScene(DeskReconError):
    """A voxel grid was requested from an empty point set."""


class SizeMismatch(DeskReconError):
    """Hash features of different table sizes were compared."""


class ShapeMismatch(DeskReconError):
    """Arrays that must share a shape do not."""


class StaleOutput(DeskReconError):
    """A render output no longer matches its cloud's structure."""


class InsufficientCandidates(DeskReconError):
    """The candidate pool ran out before the schedule finished."""


class UnknownPreset(DeskReconError):
    """A synthetic scene preset name is not recognised."""


class UnsupportedCameraModel(DeskReconError):
    """A COLMAP camera model other than PINHOLE / SIMPLE_PINHOLE."""


class ParseError(DeskReconError):
    """A text input file could not be parsed.

    Attributes
    ----------
    path : str
        File being parsed.
    line : int
        1-based line number of the offending line (0 when not line-specific).
    reason : str
        Human-readable description.
    """

    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = int(line)
        self.reason = reason
        super().__init__(f"{self.path}:{self.line}: {reason}")


class ConfigError(DeskReconError):
    """A configuration field is missing or out of range."""

    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")
