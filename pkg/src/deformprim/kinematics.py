"""Model Jacobian ``L = [I, B, RJ, R]`` mapping parameter velocities to point velocities.

Quaternions use ``(w, x, y, z)`` order. Column layout of ``L`` (and of
every generalized-force vector) is fixed by :data:`BLOCKS`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonUnitQuaternion
from .geometry import POW_FLOOR, GlobalParams, cos_sin, signed_power

BLOCKS = (("translation", 3), ("rotation", 4), ("global", 11), ("local", 3))
BLOCK_SLICES = {}
_start = 0
for _name, _size in BLOCKS:
    BLOCK_SLICES[_name] = slice(_start, _start + _size)
    _start += _size
L_COLUMNS = _start


@dataclass
class Pose:
    c: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(3)
        self.theta = np.asarray(self.theta, dtype=float).reshape(4)

    @classmethod
    def identity(cls, c=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.asarray(c, dtype=float), np.array([1.0, 0.0, 0.0, 0.0]))

    def normalized(self) -> "Pose":
        return Pose(self.c.copy(), self.theta / np.linalg.norm(self.theta))

    @property
    def R(self) -> np.ndarray:
        return rotation_from_quaternion(self.theta)


def _quadratic_form(q):
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def rotation_matrix(theta) -> np.ndarray:
    """Rotation of the normalized quaternion; accepts any nonzero ``theta``.

    Written as ``Q(theta) / |theta|^2`` so it is smooth in all four raw
    components, which is what :func:`jacobian_rotation` differentiates.
    """
    q = np.asarray(theta, dtype=float)
    return _quadratic_form(q) / float(q @ q)


def rotation_from_quaternion(theta) -> np.ndarray:
    """Right-handed rotation matrix for a unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(theta, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise NonUnitQuaternion(f"|theta| = {np.linalg.norm(q):.9g}")
    return rotation_matrix(q)


def _quadratic_form_derivatives(q):
    """``dQ/dq_i`` for i = w, x, y, z, shape (4, 3, 3)."""
    w, x, y, z = q
    dw = 2 * np.array([[w, -z, y], [z, w, -x], [-y, x, w]])
    dx = 2 * np.array([[x, y, z], [y, -x, -w], [z, w, -x]])
    dy = 2 * np.array([[-y, x, w], [x, y, z], [-w, z, -y]])
    dz = 2 * np.array([[-z, -w, x], [w, -z, y], [x, y, z]])
    return np.stack([dw, dx, dy, dz])


def jacobian_rotation(theta, p) -> np.ndarray:
    """``B = d(R(theta) p) / d theta``.

    ``p`` may be a single point ``(3,)`` or a batch ``(N, 3)``; the result has
    shape ``(3, 4)`` or ``(N, 3, 4)``.
    """
    q = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    n2 = float(q @ q)
    Q = _quadratic_form(q)
    dQ = _quadratic_form_derivatives(q)
    # d/dq_i [Q p / |q|^2] = dQ_i p / |q|^2 - 2 q_i Q p / |q|^4
    dQp = np.einsum("iab,...b->...ai", dQ, p) / n2
    Qp = np.einsum("ab,...b->...a", Q, p) / n2**2
    return dQp - 2.0 * Qp[..., :, None] * q


def _log_abs(w):
    return np.log(np.maximum(np.abs(w), POW_FLOOR))


def jacobian_global(uv, g: GlobalParams) -> np.ndarray:
    """``J = ds/dq_s`` for globally deformed surface points.

    Returns ``(3, 11)`` for one angle pair or ``(N, 3, 11)`` for a batch,
    with columns in :data:`geometry.PARAM_NAMES` order.
    """
    uv = np.asarray(uv, dtype=float)
    u, v = uv[..., 0], uv[..., 1]
    a0, a1, a2, a3 = g.a0, g.a1, g.a2, g.a3
    (cu_raw, su_raw), (cv_raw, sv_raw) = cos_sin(u), cos_sin(v)
    C = signed_power(cu_raw, g.eps1)
    S = signed_power(su_raw, g.eps1)
    Cv = signed_power(cv_raw, g.eps2)
    Sv = signed_power(sv_raw, g.eps2)
    dC = C * _log_abs(cu_raw)
    dS = S * _log_abs(su_raw)
    dCv = Cv * _log_abs(cv_raw)
    dSv = Sv * _log_abs(sv_raw)

    k1 = g.t1 * S + 1.0
    k2 = g.t2 * S + 1.0
    h = a0 * a3
    shift = g.b2 / h
    ang = np.pi * g.b3 * (S + shift)
    cos_b, sin_b = np.cos(ang), np.sin(ang)
    # d(bend term)/d(angle)
    dbend = -g.b1 * sin_b

    zeros = np.zeros_like(u)
    J = np.zeros(u.shape + (3, 11))

    # a0
    J[..., 0, 0] = k1 * a1 * C * Cv + dbend * np.pi * g.b3 * (-shift / a0)
    J[..., 1, 0] = k2 * a2 * C * Sv
    J[..., 2, 0] = a3 * S
    # a1, a2
    J[..., 0, 1] = k1 * a0 * C * Cv
    J[..., 1, 2] = k2 * a0 * C * Sv
    # a3
    J[..., 0, 3] = dbend * np.pi * g.b3 * (-shift / a3)
    J[..., 2, 3] = a0 * S
    # eps1
    J[..., 0, 4] = g.t1 * dS * a0 * a1 * C * Cv + k1 * a0 * a1 * dC * Cv + dbend * np.pi * g.b3 * dS
    J[..., 1, 4] = g.t2 * dS * a0 * a2 * C * Sv + k2 * a0 * a2 * dC * Sv
    J[..., 2, 4] = a0 * a3 * dS
    # eps2
    J[..., 0, 5] = k1 * a0 * a1 * C * dCv
    J[..., 1, 5] = k2 * a0 * a2 * C * dSv
    # t1, t2
    J[..., 0, 6] = S * a0 * a1 * C * Cv
    J[..., 1, 7] = S * a0 * a2 * C * Sv
    # b1, b2, b3
    J[..., 0, 8] = cos_b + zeros
    J[..., 0, 9] = dbend * np.pi * g.b3 / h
    J[..., 0, 10] = dbend * np.pi * (S + shift)
    return J


@dataclass
class PointJacobian:
    B: np.ndarray
    RJ: np.ndarray
    R: np.ndarray

    @property
    def L(self) -> np.ndarray:
        """Assembled ``(..., 3, 21)`` model Jacobian."""
        lead = self.B.shape[:-2]
        eye = np.broadcast_to(np.eye(3), lead + (3, 3))
        R = np.broadcast_to(self.R, lead + (3, 3))
        return np.concatenate([eye, self.B, self.RJ, R], axis=-1)


def assemble_L(pose: Pose, uv, g: GlobalParams, p) -> PointJacobian:
    """Model Jacobian at surface point(s) with model-frame position ``p``.

    ``p`` must be the locally deformed position ``psi(s)`` consistent with
    ``uv`` and ``g``. The local block is ``R`` because the shape matrix is
    the identity.
    """
    R = rotation_matrix(pose.theta)
    B = jacobian_rotation(pose.theta, p)
    J = jacobian_global(uv, g)
    RJ = np.einsum("ab,...bk->...ak", R, J)
    return PointJacobian(B=B, RJ=RJ, R=R)
