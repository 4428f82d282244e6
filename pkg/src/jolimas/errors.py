"""Exception hierarchy shared across the toolkit."""


class JolimasError(Exception):
    """Base class for all pipeline errors."""


# geometry kernel
class NotAnEllipse(JolimasError):
    """Conic does not classify as a real ellipse."""


class DegenerateInput(JolimasError):
    """Input data is rank-deficient (e.g. collinear points)."""


class NotAnEllipsoid(JolimasError):
    """Dual quadric does not decode to an ellipsoid."""


# surfaces
class OffSurface(JolimasError):
    """Query point is not on the surface."""


class StalledWalk(JolimasError):
    """Surface walk failed to advance (fold or grid hole)."""


class MeshFormatError(JolimasError):
    """Mesh file is malformed or lacks smooth per-vertex normals."""


# shading
class DegenerateHalfway(JolimasError):
    """Light and view directions are opposite; half-way vector undefined."""


# detection
class NoSpecularity(JolimasError):
    """No blob above threshold and minimum area."""


class BackprojectionMiss(JolimasError):
    """A contour pixel's ray does not hit the surface."""


# canonical warp
class NoCrossing(JolimasError):
    """March never crossed the contour / never reached the limit angle."""


class WarpFailed(JolimasError):
    """Too few directions survived to fit the canonical contour."""


# model
class DegenerateConfiguration(JolimasError):
    """View set does not determine the dual quadric uniquely."""


class NoVisibleReflection(JolimasError):
    """No surface point with a small enough incident angle is visible."""


class ParseError(JolimasError):
    """Model or config file is malformed."""
