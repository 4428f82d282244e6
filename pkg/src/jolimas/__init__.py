"""Multi-view specularity reconstruction and prediction toolkit.

Reconstructs a canonical ellipsoid model of a specularity from several
views of a curved glossy surface and predicts the specularity contour
for new viewpoints, with a built-in Torrance-Sparrow synthetic renderer
for validation.
"""

__version__ = "0.1.0"
