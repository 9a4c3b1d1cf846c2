"""Exception types shared across the package."""


class MarkerMapError(Exception):
    """Base class for all package-specific errors."""


class PointBehindCamera(MarkerMapError):
    """A point to be projected has non-positive depth in the camera frame."""


class DegenerateObservation(MarkerMapError):
    """The observed corners are collinear or otherwise unusable for pose estimation."""


class NotLocalizable(MarkerMapError):
    """A frame observes no mapped markers and cannot be localized."""


class DegenerateCycle(MarkerMapError):
    """A basis cycle has a residual rotation of ~180 deg; its log has no defined axis."""


class RankDeficientCycles(MarkerMapError):
    """The translation KKT system is singular (degenerate graph)."""


class NoOverlap(MarkerMapError):
    """Estimate and ground truth share no markers / no associated frames."""


class InsufficientData(MarkerMapError):
    """The input sequence has too few co-observations to build a map."""


class ParseError(MarkerMapError):
    """Malformed input file."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
