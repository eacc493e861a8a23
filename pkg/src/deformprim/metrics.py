"""Chamfer-L1 distance and voxel IoU for primitive unions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import local_deform as ld
from .errors import EmptySet, EmptyUnion
from .geometry import inside_outside, inverse_taper_bend

DEFAULT_VOXEL_RES = 64
BOUNDS_PAD = 0.05


def chamfer_l1(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


class OccupancyTester:
    """Inside test for one primitive, caching its inverse local flow.

    World points are pulled back through the pose, the inverse local flow
    and the inverse global deformation, then tested against the
    superquadric implicit function.
    """

    def __init__(self, prim):
        self.prim = prim
        v = prim.smoothed_velocity()
        self.inv = None if v.is_zero() else ld.inverse_flow(v, prim.steps)

    def model_coords(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        p = (x - self.prim.pose.c) @ self.prim.R
        if self.inv is not None:
            p = ld.apply_flow(self.inv, p)
        return inverse_taper_bend(p, self.prim.globals, strict=False)

    def __call__(self, x) -> np.ndarray:
        return inside_outside(self.model_coords(x), self.prim.globals) <= 1.0


def primitive_occupancy(x, prim) -> np.ndarray:
    """Whether world point(s) ``x`` lie inside ``prim``."""
    return OccupancyTester(prim)(x)


@dataclass
class VoxelGrid:
    """Cubic lattice of voxel centers over the box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray
    res: int = DEFAULT_VOXEL_RES
    occupancy: np.ndarray | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.hi - self.lo) / self.res

    def axes(self):
        return [self.lo[k] + (np.arange(self.res) + 0.5) * self.voxel_size[k] for k in range(3)]

    def centers(self) -> np.ndarray:
        xs, ys, zs = self.axes()
        g = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def with_occupancy(self, occ) -> "VoxelGrid":
        occ = np.asarray(occ, dtype=bool).reshape(self.res, self.res, self.res)
        return VoxelGrid(self.lo, self.hi, self.res, occ)


def bounds_for(*point_sets, pad: float = BOUNDS_PAD):
    """Union bounding box of the point sets, padded by ``pad`` of its size per axis."""
    pts = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 3) for p in point_sets])
    lo, hi = pts.min(0), pts.max(0)
    size = np.maximum(hi - lo, 1e-9)
    return lo - pad * size, hi + pad * size


def primitives_occupancy(prims, grid: VoxelGrid, chunk: int = 65536) -> VoxelGrid:
    """Union occupancy of ``prims`` on ``grid``."""
    centers = grid.centers()
    occ = np.zeros(len(centers), dtype=bool)
    for prim in prims:
        test = OccupancyTester(prim)
        lo, hi = prim.x.min(0), prim.x.max(0)
        # cheap reject outside the primitive's padded sample bounding box
        pad = 0.1 * (hi - lo).max() + 1e-9
        near = np.all((centers >= lo - pad) & (centers <= hi + pad), axis=1)
        idx = np.flatnonzero(near & ~occ)
        for k in range(0, len(idx), chunk):
            sl = idx[k : k + chunk]
            occ[sl] |= test(centers[sl])
    return grid.with_occupancy(occ)


def _ray_hits(vertices, faces, qx, qy):
    """For vertical rays at ``(qx, qy)``, yield ``(query_index, z_hit)`` pairs.

    Rays are nudged by a tiny fixed offset so that rays on a regular grid
    do not pass exactly through shared mesh edges or vertices.
    """
    tri = vertices[faces]
    scale = max(float(np.ptp(vertices)), 1e-9)
    qx = qx + 1.2345678e-9 * scale
    qy = qy + 2.3456789e-9 * scale
    order = np.argsort(qx, kind="stable")
    sx = qx[order]
    out_i, out_z = [], []
    for t in tri:
        (ax, ay, az), (bx, by, bz), (cx, cy, cz) = t
        d = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(d) < 1e-18 * scale * scale:
            continue
        i0 = np.searchsorted(sx, min(ax, bx, cx), "left")
        i1 = np.searchsorted(sx, max(ax, bx, cx), "right")
        if i0 == i1:
            continue
        cand = order[i0:i1]
        py = qy[cand]
        cand = cand[(py >= min(ay, by, cy)) & (py <= max(ay, by, cy))]
        if len(cand) == 0:
            continue
        px, py = qx[cand], qy[cand]
        l1 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / d
        l2 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / d
        l3 = 1.0 - l1 - l2
        hit = (l1 >= 0) & (l2 >= 0) & (l3 >= 0)
        if np.any(hit):
            out_i.append(cand[hit])
            out_z.append(l1[hit] * az + l2[hit] * bz + l3[hit] * cz)
    if not out_i:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(out_i), np.concatenate(out_z)


def points_in_mesh(vertices, faces, points) -> np.ndarray:
    """Ray-parity inside test of points against a closed triangle mesh."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    qi, qz = _ray_hits(vertices, faces, points[:, 0], points[:, 1])
    above = qz > points[qi, 2]
    counts = np.bincount(qi[above], minlength=len(points))
    return counts % 2 == 1


def mesh_occupancy(vertices, faces, grid: VoxelGrid) -> VoxelGrid:
    """Voxelize a closed mesh by casting one vertical ray per voxel column."""
    xs, ys, zs = grid.axes()
    cx, cy = np.meshgrid(xs, ys, indexing="ij")
    qi, qz = _ray_hits(np.asarray(vertices, float), np.asarray(faces, np.int64), cx.ravel(), cy.ravel())
    occ = np.zeros((grid.res * grid.res, grid.res), dtype=bool)
    order = np.lexsort((qz, qi))
    qi, qz = qi[order], qz[order]
    starts = np.searchsorted(qi, np.arange(grid.res * grid.res + 1))
    for col in np.flatnonzero(np.diff(starts)):
        zh = qz[starts[col] : starts[col + 1]]
        # number of crossings above each voxel center
        above = len(zh) - np.searchsorted(zh, zs, "right")
        occ[col] = above % 2 == 1
    return grid.with_occupancy(occ.reshape(grid.res, grid.res, grid.res))


def iou(pred, target_occupancy: VoxelGrid) -> float:
    """Voxel IoU of a primitive list (or a voxel grid) against target occupancy."""
    if isinstance(pred, VoxelGrid):
        pred_occ = pred.occupancy
    else:
        pred_occ = primitives_occupancy(pred, target_occupancy).occupancy
    tgt = target_occupancy.occupancy
    if pred_occ.shape != tgt.shape:
        raise ValueError("prediction and target grids differ")
    union = np.logical_or(pred_occ, tgt).sum()
    if union == 0:
        raise EmptyUnion("both prediction and target are empty")
    return float(np.logical_and(pred_occ, tgt).sum() / union)


def surface_samples(prims, n_per_primitive: int = 4096, seed: int = 0, mesh_grid=(64, 64)) -> np.ndarray:
    """Area-weighted samples on the union of primitive surfaces (overlaps included)."""
    from .fileio import primitive_mesh, sample_surface

    out = []
    for k, prim in enumerate(prims):
        v, f = primitive_mesh(prim, *mesh_grid)
        out.append(sample_surface(v, f, n_per_primitive, seed + k))
    return np.concatenate(out)


def evaluate(prims, target_points, target_mesh=None, res: int = DEFAULT_VOXEL_RES,
             n_per_primitive: int = 1024, seed: int = 0) -> dict:
    """Chamfer-L1, IoU (when a closed target mesh is given) and per-primitive stats."""
    target_points = np.asarray(target_points, dtype=float)
    pred_pts = surface_samples(prims, n_per_primitive, seed)
    result = {"chamfer_l1": chamfer_l1(pred_pts, target_points), "iou": None}
    per = []
    allx = np.concatenate([p.x for p in prims])
    owners = np.repeat(np.arange(len(prims)), [len(p.x) for p in prims])
    _, idx = cKDTree(allx).query(target_points)
    owner = owners[idx]
    for k, prim in enumerate(prims):
        own = target_points[owner == k]
        samples = pred_pts[k * n_per_primitive : (k + 1) * n_per_primitive]
        per.append({
            "index": k,
            "assigned_points": int(len(own)),
            "chamfer_l1": chamfer_l1(samples, own) if len(own) else None,
            "center": prim.pose.c.tolist(),
        })
    if target_mesh is not None:
        verts, faces = target_mesh
        lo, hi = bounds_for(verts, allx)
        grid = VoxelGrid(lo, hi, res)
        tgt = mesh_occupancy(verts, faces, grid)
        result["iou"] = iou(prims, tgt)
    result["per_primitive"] = per
    return result
