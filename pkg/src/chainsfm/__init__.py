"""Chain SfM: global camera poses from bifocal calibrations with little overlap.

Scales successive relative translations along a chain of cameras using line
coplanarity hypotheses and relaxed trifocal constraints, selects the scale
with a parameterless a-contrario criterion, composes global poses and refines
them with bundle adjustment.
"""

from . import errors
from .geometry import (
    GlobalPose,
    Intrinsics,
    Line3,
    RelativePose,
    Segment2,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "GlobalPose",
    "Intrinsics",
    "Line3",
    "RelativePose",
    "Segment2",
    "__version__",
]
