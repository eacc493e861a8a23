"""Superquadric surfaces, tapering/bending, and the inside-outside function.

All functions are vectorized: angle and position arguments may carry any
leading batch shape, with the last axis holding the components.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields, replace

import numpy as np

from .errors import DegenerateTaper

EPS_MIN, EPS_MAX = 0.1, 2.0
SCALE_MIN = 1e-3
TAPER_MAX = 0.9
# bases below this magnitude are clamped where a derivative needs log|w|
POW_FLOOR = 1e-6
# cos/sin values below this are rounding residue of on-axis angles (sin(pi)
# is 1.2e-16, not 0) and are snapped to zero, so value and derivative agree
TRIG_ZERO = 1e-12

PARAM_NAMES = ("a0", "a1", "a2", "a3", "eps1", "eps2", "t1", "t2", "b1", "b2", "b3")


@dataclass(frozen=True)
class GlobalParams:
    """The eleven global shape parameters of one primitive.

    ``a0`` is an overall scale, ``a1..a3`` per-axis aspect ratios,
    ``eps1/eps2`` squareness exponents, ``t1/t2`` linear tapering along z
    for the x and y axes, and ``b1/b2/b3`` bending magnitude, location and
    influence.
    """

    a0: float = 1.0
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    eps1: float = 1.0
    eps2: float = 1.0
    t1: float = 0.0
    t2: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    b3: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "GlobalParams":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (11,):
            raise ValueError(f"expected 11 global parameters, got shape {arr.shape}")
        return cls(*arr.tolist())

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **changes) -> "GlobalParams":
        return replace(self, **changes)

    @property
    def z_extent(self) -> float:
        """Half-height ``a0*a3`` of the undeformed primitive."""
        return self.a0 * self.a3

    def is_valid(self) -> bool:
        arr = self.to_array()
        return bool(
            np.all(np.isfinite(arr))
            and min(self.a0, self.a1, self.a2, self.a3) > 0
            and EPS_MIN <= self.eps1 <= EPS_MAX
            and EPS_MIN <= self.eps2 <= EPS_MAX
            and abs(self.t1) < 1
            and abs(self.t2) < 1
        )

    def projected(self) -> "GlobalParams":
        """Box projection onto the valid parameter ranges."""
        return project_global_array(self.to_array())


def project_global_array(arr) -> GlobalParams:
    arr = np.array(arr, dtype=float)
    arr[0:4] = np.maximum(arr[0:4], SCALE_MIN)
    arr[4:6] = np.clip(arr[4:6], EPS_MIN, EPS_MAX)
    arr[6:8] = np.clip(arr[6:8], -TAPER_MAX, TAPER_MAX)
    return GlobalParams.from_array(arr)


def signed_power(w, eps):
    """``sgn(w) * |w|**eps``."""
    w = np.asarray(w, dtype=float)
    return np.sign(w) * np.abs(w) ** eps


def _split_uv(uv):
    uv = np.asarray(uv, dtype=float)
    return uv[..., 0], uv[..., 1]


def cos_sin(angle):
    """``cos`` and ``sin`` with on-axis rounding residue set to exactly zero."""
    c, s = np.cos(angle), np.sin(angle)
    return np.where(np.abs(c) < TRIG_ZERO, 0.0, c), np.where(np.abs(s) < TRIG_ZERO, 0.0, s)


def superquadric_surface(uv, g: GlobalParams) -> np.ndarray:
    """Point on the undeformed superquadric at angles ``uv = (u, v)``.

    ``u`` in [-pi/2, pi/2] is the latitude and ``v`` in [-pi, pi] the
    longitude.
    """
    u, v = _split_uv(uv)
    (cu, su), (cv, sv) = cos_sin(u), cos_sin(v)
    cu, su = signed_power(cu, g.eps1), signed_power(su, g.eps1)
    cv, sv = signed_power(cv, g.eps2), signed_power(sv, g.eps2)
    return g.a0 * np.stack([g.a1 * cu * cv, g.a2 * cu * sv, g.a3 * su], axis=-1)


def bend_angle(z, g: GlobalParams):
    """Cosine argument of the bending term for normalized height ``z = e3/(a0 a3)``."""
    return np.pi * g.b3 * (z + g.b2 / g.z_extent)


def taper_bend(e, g: GlobalParams) -> np.ndarray:
    """Apply linear tapering and bending to model-frame positions ``e``."""
    e = np.asarray(e, dtype=float)
    z = e[..., 2] / g.z_extent
    s1 = (g.t1 * z + 1.0) * e[..., 0] + g.b1 * np.cos(bend_angle(z, g))
    s2 = (g.t2 * z + 1.0) * e[..., 1]
    return np.stack([s1, s2, e[..., 2]], axis=-1)


def taper_factors(z, g: GlobalParams):
    return g.t1 * z + 1.0, g.t2 * z + 1.0


def inverse_taper_bend(s, g: GlobalParams, strict: bool = True) -> np.ndarray:
    """Exact inverse of :func:`taper_bend`.

    The height coordinate is untouched by the deformation, so the bending
    offset and tapering factors can be recomputed from ``s3`` and undone.

    With ``strict`` a vanishing tapering factor raises
    :class:`DegenerateTaper`; otherwise such points map to infinity, which
    is outside every primitive.
    """
    s = np.asarray(s, dtype=float)
    z = s[..., 2] / g.z_extent
    k1, k2 = taper_factors(z, g)
    bad = (np.abs(k1) < 1e-9) | (np.abs(k2) < 1e-9)
    if np.any(bad):
        if strict:
            raise DegenerateTaper(
                f"tapering factor vanishes at height {float(np.ravel(s[..., 2])[np.argmax(np.ravel(bad))]):.6g}"
            )
        k1 = np.where(bad, 0.0, k1)
        k2 = np.where(bad, 0.0, k2)
    x = s[..., 0] - g.b1 * np.cos(bend_angle(z, g))
    with np.errstate(divide="ignore", invalid="ignore"):
        e1 = np.where(bad, np.inf, x / np.where(bad, 1.0, k1))
        e2 = np.where(bad, np.inf, s[..., 1] / np.where(bad, 1.0, k2))
    return np.stack([e1, e2, s[..., 2]], axis=-1)


def inside_outside(x, g: GlobalParams) -> np.ndarray:
    """Superquadric implicit function in the undeformed model frame.

    Values below 1 are inside, 1 on the surface, above 1 outside.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x[..., 0] / (g.a0 * g.a1))
    ay = np.abs(x[..., 1] / (g.a0 * g.a2))
    az = np.abs(x[..., 2] / (g.a0 * g.a3))
    with np.errstate(over="ignore", invalid="ignore"):
        xy = (ax ** (2.0 / g.eps2) + ay ** (2.0 / g.eps2)) ** (g.eps2 / g.eps1)
        f = xy + az ** (2.0 / g.eps1)
    return np.where(np.isnan(f), np.inf, f)


def uv_grid(nu: int = 32, nv: int = 32) -> np.ndarray:
    """Uniform ``(nu*nv, 2)`` angle grid.

    Latitudes sit at cell centers, so the poles are never duplicated;
    longitudes cover [-pi, pi) without repeating the seam.
    """
    u = -np.pi / 2 + (np.arange(nu) + 0.5) * np.pi / nu
    v = -np.pi + np.arange(nv) * 2 * np.pi / nv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


def equiangular_uv(uv, eps1: float, eps2: float) -> np.ndarray:
    """Re-space angles so base-surface points are uniform in polar angle.

    A uniform angle grid crowds superquadric samples onto edges and corners
    as the exponents shrink. Mapping each angle ``phi`` to ``eta`` with
    ``tan(eta) = sgn * |tan(phi)|**(1/eps)`` puts the surface point of
    ``eta`` at polar angle ``phi``. The map is the identity for ``eps = 1``.
    """
    uv = np.asarray(uv, dtype=float)
    u, v = uv[..., 0], uv[..., 1]
    p1, p2 = 1.0 / eps1, 1.0 / eps2
    su, cu = np.sin(u), np.cos(u)
    sv, cv = np.sin(v), np.cos(v)
    u2 = np.arctan2(np.sign(su) * np.abs(su) ** p1, np.abs(cu) ** p1)
    v2 = np.arctan2(np.sign(sv) * np.abs(sv) ** p2, np.sign(cv) * np.abs(cv) ** p2)
    return np.stack([u2, v2], axis=-1)


def global_surface(uv, g: GlobalParams) -> np.ndarray:
    """Globally deformed surface point ``taper_bend(superquadric_surface(uv))``."""
    return taper_bend(superquadric_surface(uv, g), g)
