"""Deformable superquadric primitives fitted to shapes by physics-style dynamics.

Each primitive is a superquadric with tapering and bending, refined by a
diffeomorphic local displacement, placed in the world by a rigid pose.
External forces pull primitive surfaces toward a target point cloud and are
projected into parameter space through the model Jacobian.
"""

from .errors import DeformPrimError
from .fitting import FitResult, FittingConfig, fit, initialize
from .forces import TargetCloud
from .geometry import GlobalParams
from .kinematics import Pose
from .primitive import Primitive

__all__ = [
    "DeformPrimError",
    "FitResult",
    "FittingConfig",
    "GlobalParams",
    "Pose",
    "Primitive",
    "TargetCloud",
    "fit",
    "initialize",
]
__version__ = "0.1.0"
