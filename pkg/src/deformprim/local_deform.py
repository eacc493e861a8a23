"""Stationary velocity fields on a model-frame lattice and their flows.

A :class:`VelocityField` lives on an ``n x n x n`` lattice of nodes spanning
the cube ``[-half, half]^3``. Integrating it for unit time by scaling and
squaring gives a diffeomorphism ``psi``; the stored :class:`FlowField` holds
the displacement ``psi - id`` at the same nodes. Queries outside the cube see
zero velocity and zero displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d, map_coordinates

from .errors import UnstableField

DEFAULT_RES = 16
DEFAULT_STEPS = 7
DEFAULT_SIGMA = 1.0
EXTENT_MARGIN = 1.2
CAP_FRACTION = 0.5


def _spacing(n: int, half: float) -> float:
    return 2.0 * half / (n - 1)


def node_positions(n: int, half: float) -> np.ndarray:
    """``(n, n, n, 3)`` array of lattice node coordinates."""
    lin = np.linspace(-half, half, n)
    xx, yy, zz = np.meshgrid(lin, lin, lin, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


@dataclass
class VelocityField:
    """Vector field sampled on the lattice (``grid`` has shape ``(n, n, n, 3)``)."""

    grid: np.ndarray
    half: float
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        n = self.grid.shape[0]
        if self.grid.shape != (n, n, n, 3) or n < 2:
            raise ValueError(f"velocity grid must be (n, n, n, 3), got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("velocity grid contains non-finite values")
        self.half = float(self.half)

    @classmethod
    def zeros(cls, half: float, res: int = DEFAULT_RES, sigma: float = DEFAULT_SIGMA):
        return cls(np.zeros((res, res, res, 3)), half, sigma)

    @property
    def res(self) -> int:
        return self.grid.shape[0]

    @property
    def spacing(self) -> float:
        return _spacing(self.res, self.half)

    @property
    def cap(self) -> float:
        return CAP_FRACTION * self.half

    def is_zero(self) -> bool:
        return not np.any(self.grid)

    def copy(self) -> "VelocityField":
        return VelocityField(self.grid.copy(), self.half, self.sigma)


@dataclass
class FlowField:
    """Displacement ``psi - id`` of an integrated velocity field."""

    disp: np.ndarray
    half: float
    inverse: bool = False
    _zero: bool = field(default=False, repr=False)

    @property
    def res(self) -> int:
        return self.disp.shape[0]

    @property
    def spacing(self) -> float:
        return _spacing(self.res, self.half)

    @classmethod
    def identity(cls, half: float, res: int = DEFAULT_RES) -> "FlowField":
        return cls(np.zeros((res, res, res, 3)), half, _zero=True)


def trilinear_weights(points, n: int, half: float):
    """Corner indices and weights for trilinear interpolation on the lattice.

    Returns ``(idx, w)`` with shapes ``(M, 8)``: flat node indices into an
    ``n**3`` lattice and the matching weights. Points outside the cube get
    all-zero weights.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    h = _spacing(n, half)
    g = (pts + half) / h
    inside = np.all((g >= 0.0) & (g <= n - 1), axis=1)
    g = np.where(inside[:, None], g, 0.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), n - 2)
    f = g - i0
    base = (i0[:, 0] * n + i0[:, 1]) * n + i0[:, 2]
    idx = base[:, None] + _CORNER_OFFSETS[n]
    # per-axis weights (M, 3, 2) for the lower and upper corner
    fw = np.stack([1.0 - f, f], axis=-1)
    w = (fw[:, 0, :, None, None] * fw[:, 1, None, :, None] * fw[:, 2, None, None, :]).reshape(-1, 8)
    w *= inside[:, None]
    return idx, w


class _Offsets(dict):
    """Flat index offsets of the 8 cell corners, per lattice size."""

    def __missing__(self, n):
        d = np.array([0, 1])
        off = ((d[:, None, None] * n + d[None, :, None]) * n + d[None, None, :]).ravel()
        self[n] = off
        return off


_CORNER_OFFSETS = _Offsets()


def sample_grid(grid: np.ndarray, half: float, points) -> np.ndarray:
    """Trilinearly interpolate a vector lattice at ``points`` (zero outside)."""
    points = np.asarray(points, dtype=float)
    n = grid.shape[0]
    coords = ((points.reshape(-1, 3) + half) / _spacing(n, half)).T
    # order-1 "constant" mode is plain trilinear inside and exactly cval outside,
    # matching the weights of trilinear_weights
    out = np.stack(
        [map_coordinates(grid[..., c], coords, order=1, mode="constant", cval=0.0) for c in range(grid.shape[-1])],
        axis=-1,
    )
    return out.reshape(points.shape[:-1] + (grid.shape[-1],))


def splat_to_grid(values, points, n: int, half: float) -> np.ndarray:
    """Adjoint of :func:`sample_grid`: scatter per-point vectors onto the lattice."""
    values = np.asarray(values, dtype=float).reshape(-1, 3)
    idx, w = trilinear_weights(points, n, half)
    out = np.zeros((n**3, 3))
    contrib = w[:, :, None] * values[:, None, :]
    for c in range(3):
        out[:, c] = np.bincount(idx.ravel(), weights=contrib[:, :, c].ravel(), minlength=n**3)
    return out.reshape(n, n, n, 3)


def smooth_grid(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing, truncated at 3 sigma, zero padded.

    The operator is symmetric, so it is its own adjoint.
    """
    out = np.asarray(grid, dtype=float)
    if sigma <= 0:
        return out.copy()
    for axis in range(3):
        out = gaussian_filter1d(out, sigma, axis=axis, mode="constant", cval=0.0, truncate=3.0)
    return out


def smooth(v_raw: VelocityField) -> VelocityField:
    return VelocityField(smooth_grid(v_raw.grid, v_raw.sigma), v_raw.half, v_raw.sigma)


def cap_magnitude(grid: np.ndarray, cap: float) -> np.ndarray:
    """Globally rescale so the largest vector norm is at most ``cap``."""
    peak = float(np.max(np.linalg.norm(grid, axis=-1), initial=0.0))
    if peak > cap > 0:
        return grid * (cap / peak)
    return grid


def _scaling_and_squaring(grid: np.ndarray, half: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("scaling and squaring needs at least one step")
    n = grid.shape[0]
    disp = grid / 2.0**steps
    substep = float(np.max(np.linalg.norm(disp, axis=-1), initial=0.0))
    if substep > _spacing(n, half):
        raise UnstableField(
            f"substep displacement {substep:.4g} exceeds grid spacing {_spacing(n, half):.4g}"
        )
    if not np.any(disp):
        return np.zeros_like(grid)
    nodes = node_positions(n, half)
    for _ in range(steps):
        disp = disp + sample_grid(disp, half, nodes + disp)
    return disp


def integrate_ss(v: VelocityField, steps: int = DEFAULT_STEPS) -> FlowField:
    """Flow of ``v`` at unit time by scaling and squaring.

    The field is scaled by ``2**-steps`` and the resulting small displacement
    is composed with itself ``steps`` times.
    """
    disp = _scaling_and_squaring(v.grid, v.half, steps)
    return FlowField(disp, v.half, inverse=False, _zero=not np.any(disp))


def inverse_flow(v: VelocityField, steps: int = DEFAULT_STEPS) -> FlowField:
    """Inverse diffeomorphism, obtained by integrating ``-v``."""
    disp = _scaling_and_squaring(-v.grid, v.half, steps)
    return FlowField(disp, v.half, inverse=True, _zero=not np.any(disp))


def apply_flow(flow: FlowField, s) -> np.ndarray:
    """``psi(s) = s + d(s)`` with ``d`` trilinearly sampled."""
    s = np.asarray(s, dtype=float)
    if flow._zero:
        return s.copy()
    return s + sample_grid(flow.disp, flow.half, s)


def jacobian_determinant(flow: FlowField) -> np.ndarray:
    """Determinant of ``d psi / dx`` at every lattice cell center.

    Uses the trilinear interpolant's derivative, i.e. averaged forward
    differences over each cell.
    """
    d = flow.disp
    h = flow.spacing

    def cell_diff(axis):
        a = np.diff(d, axis=axis) / h
        # average the 4 parallel edges of each cell
        others = [ax for ax in range(3) if ax != axis]
        for ax in others:
            a = 0.5 * (np.take(a, range(a.shape[ax] - 1), axis=ax) + np.take(a, range(1, a.shape[ax]), axis=ax))
        return a

    cols = [cell_diff(ax) for ax in range(3)]
    jac = np.stack(cols, axis=-1) + np.eye(3)
    return np.linalg.det(jac)


def extent_for(half_size: float) -> float:
    """Lattice half-width for a primitive whose largest half-axis is ``half_size``."""
    return EXTENT_MARGIN * half_size
