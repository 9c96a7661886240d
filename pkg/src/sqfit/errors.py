"""Exception types shared across the package."""


class SqfitError(Exception):
    """Base class for all library errors."""


class TaperSingular(SqfitError):
    """A taper scale factor dropped to (or below) zero."""


class BendOutOfRange(SqfitError):
    """Bend arc angle left the valid (-pi/2, pi/2) range."""


class BehindCamera(SqfitError):
    """Points fell behind (or too close to) the camera plane."""

    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"{len(self.indices)} point(s) behind camera: "
                         f"{self.indices[:8]}{'...' if len(self.indices) > 8 else ''}")


class EmptySet(SqfitError):
    """A point set that must be non-empty was empty."""


class EmptySilhouette(SqfitError):
    """Silhouette mask contains no foreground pixels."""


class EmptyTarget(SqfitError):
    """Target shape has no points."""


class FlowBlowup(SqfitError):
    """Integrated displacement exceeded the velocity-grid domain."""


class NonFiniteLoss(SqfitError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term):
        self.term = term
        super().__init__(f"non-finite value in loss term '{term}'")


class DegenerateUnion(SqfitError):
    """IoU undefined: both occupancy fields are empty."""


class ParseError(SqfitError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonTriangulatable(SqfitError):
    """Mesh face cannot be decomposed into triangles."""


class EmptyMesh(SqfitError):
    """Mesh contains no triangles."""


class VersionMismatch(SqfitError):
    """Model file written by an incompatible format version."""
