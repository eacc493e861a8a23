"""Deformable primitive state: pose, global shape, local velocity field, surface samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import local_deform as ld
from .geometry import GlobalParams, superquadric_surface, taper_bend, uv_grid
from .kinematics import Pose, rotation_matrix


def required_half(g: GlobalParams, s: np.ndarray | None = None) -> float:
    """Lattice half-width covering the primitive.

    Uses the undeformed half-axes, widened to cover the tapered/bent samples
    ``s`` when given.
    """
    size = g.a0 * max(g.a1, g.a2, g.a3)
    if s is not None and s.size:
        size = max(size, float(np.max(np.abs(s))))
    return ld.extent_for(size)


@dataclass(eq=False)
class Primitive:
    """One superquadric with global and local deformation placed in the world.

    ``velocity`` holds the raw (unsmoothed) velocity lattice; the field that
    is integrated is its Gaussian-smoothed version. Surface caches (``e``,
    ``s``, ``p``, ``x``) are recomputed by :meth:`refresh`.

    World positions follow ``x = c + R p`` with ``p = psi(s)``.
    """

    pose: Pose
    globals: GlobalParams
    velocity: ld.VelocityField
    uv: np.ndarray = field(default_factory=uv_grid)
    steps: int = ld.DEFAULT_STEPS

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)
        self.refresh()

    @classmethod
    def sphere(cls, center, radius: float, uv=None, res: int = ld.DEFAULT_RES,
               sigma: float = ld.DEFAULT_SIGMA, steps: int = ld.DEFAULT_STEPS) -> "Primitive":
        g = GlobalParams(a0=radius)
        v = ld.VelocityField.zeros(required_half(g), res, sigma)
        return cls(Pose.identity(center), g, v, uv_grid() if uv is None else uv, steps)

    def refresh(self) -> None:
        self.e = superquadric_surface(self.uv, self.globals)
        self.s = taper_bend(self.e, self.globals)
        if self.velocity.is_zero():
            # an all-zero field carries no state, so the lattice may follow the shape
            self.velocity.half = required_half(self.globals, self.s)
        self.flow = ld.integrate_ss(self.smoothed_velocity(), self.steps)
        self.p = ld.apply_flow(self.flow, self.s)
        self.R = rotation_matrix(self.pose.theta)
        self.x = self.pose.c + self.p @ self.R.T

    def smoothed_velocity(self) -> ld.VelocityField:
        return ld.smooth(self.velocity)

    def copy(self) -> "Primitive":
        return Primitive(
            Pose(self.pose.c.copy(), self.pose.theta.copy()),
            self.globals,
            self.velocity.copy(),
            self.uv,
            self.steps,
        )

    def world_points(self, uv) -> np.ndarray:
        """World positions of arbitrary ``uv`` samples under the current state."""
        s = taper_bend(superquadric_surface(uv, self.globals), self.globals)
        p = ld.apply_flow(self.flow, s)
        return self.pose.c + p @ self.R.T

    @property
    def centroid(self) -> np.ndarray:
        return self.x.mean(axis=0)
