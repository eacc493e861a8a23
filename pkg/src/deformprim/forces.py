"""External forces from target correspondences and their generalized projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import local_deform as ld
from .errors import EmptyAssignment, EmptySet
from .kinematics import jacobian_global, jacobian_rotation
from .primitive import Primitive

CLIP_FACTOR = 10.0
JACOBI_FLOOR = 1e-2


class TargetCloud:
    """World-frame target points with a k-d tree for nearest-neighbor queries."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise EmptySet(f"target cloud needs an (N>=1, 3) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("target cloud contains non-finite points")
        self.points = pts
        self.tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, query):
        """Distances and indices of the nearest target point for each query."""
        return self.tree.query(np.asarray(query, dtype=float).reshape(-1, 3))

    def subset(self, idx) -> "TargetCloud":
        return TargetCloud(self.points[idx])

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


@dataclass
class ForceField:
    """Per-sample world-frame forces on one primitive.

    ``loss`` is the external-force potential of this primitive, whose
    negative gradient with respect to the sample positions is ``forces``
    (for fixed correspondences): ``gamma * sum(huber(d))`` over all
    correspondences, with ``huber(d) = d**2 / 2`` below ``clip_distance``
    and linear above it.
    """

    forces: np.ndarray
    gamma: float
    loss: float = 0.0
    clipped: int = 0
    clip_distance: float = np.inf
    weights: np.ndarray | None = None  # correspondences acting on each sample


@dataclass
class GeneralizedForce:
    """Generalized forces ``L^T f`` split by parameter block."""

    f_c: np.ndarray
    f_theta: np.ndarray
    f_s: np.ndarray
    f_d: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.f_c, self.f_theta, self.f_s, np.ravel(self.f_d)])


def huber(d, delta: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if not np.isfinite(delta):
        return 0.5 * d**2
    return np.where(d <= delta, 0.5 * d**2, delta * (d - 0.5 * delta))


def clip_distance_for(distances, factor: float = CLIP_FACTOR) -> float:
    """``factor`` times the median nonzero correspondence distance (inf if none)."""
    d = np.asarray(distances, dtype=float)
    nz = d[d > 0]
    if nz.size == 0 or not np.isfinite(factor):
        return np.inf
    return factor * float(np.median(nz))


def _pull(delta_vec, dist, cap):
    """Correspondence vectors with norms capped at ``cap``."""
    if not np.isfinite(cap):
        return delta_vec, 0
    over = dist > cap
    if not np.any(over):
        return delta_vec, 0
    scale = np.where(over, cap / np.maximum(dist, 1e-300), 1.0)
    return delta_vec * scale[:, None], int(over.sum())


def correspondences(prim: Primitive, target: TargetCloud, attract: bool = True, coverage: bool = True):
    """Sample-to-target and target-to-sample nearest-neighbor pairs.

    Returns a list of ``(sample_index, target_index, distance)`` triples,
    one per direction in use.
    """
    out = []
    x = prim.x
    if attract:
        dist, idx = target.nearest(x)
        out.append((np.arange(len(x)), idx, dist))
    if coverage:
        dist, idx = cKDTree(x).query(target.points)
        out.append((idx, np.arange(len(target)), dist))
    return out


def external_forces(
    prim: Primitive,
    target: TargetCloud,
    gamma: float = 1.0,
    *,
    attract: bool = True,
    coverage: bool = True,
    coverage_weight: float = 1.0,
    clip: float = CLIP_FACTOR,
    clip_distance: float | None = None,
) -> ForceField:
    """Forces pulling ``prim``'s samples toward ``target``.

    ``target`` should hold only the points assigned to this primitive. The
    attraction term pulls every sample toward its nearest target point by
    ``gamma * (t - x)``; the coverage term pulls, for every target point,
    its nearest sample toward it, accumulated per sample. Each
    correspondence vector is capped at ``clip_distance`` (default: ``clip``
    times the median correspondence distance) to resist outliers.
    """
    if len(target) == 0:
        raise EmptyAssignment("primitive has no assigned target points")
    x = prim.x
    pairs = correspondences(prim, target, attract, coverage and coverage_weight != 0.0)
    weights = ([1.0] if attract else []) + ([coverage_weight] if coverage and coverage_weight != 0.0 else [])
    if clip_distance is None:
        all_d = np.concatenate([d for _, _, d in pairs]) if pairs else np.zeros(0)
        clip_distance = clip_distance_for(all_d, clip)
    forces = np.zeros_like(x)
    counts = np.zeros(len(x))
    loss = 0.0
    n_clipped = 0
    for (si, ti, dist), w in zip(pairs, weights):
        vec, n = _pull(target.points[ti] - x[si], dist, clip_distance)
        np.add.at(forces, si, w * gamma * vec)
        counts += w * np.bincount(si, minlength=len(x))
        loss += w * gamma * float(huber(dist, clip_distance).sum())
        n_clipped += n
    return ForceField(forces, gamma, loss, n_clipped, clip_distance, counts)


def local_generalized_force(prim: Primitive, forces: np.ndarray) -> np.ndarray:
    """Local block: model-frame forces splatted onto the raw velocity lattice.

    This is the adjoint of ``sample(smooth(.), s)``, so it lands on the
    same lattice that :class:`Primitive` stores.
    """
    v = prim.velocity
    g_model = forces @ prim.R  # rows are R^T f_r
    grid = ld.splat_to_grid(g_model, prim.s, v.res, v.half)
    return ld.smooth_grid(grid, v.sigma)


def generalized_forces(prim: Primitive, forces, with_local: bool = True) -> GeneralizedForce:
    """Project per-sample forces into parameter space via ``L^T``."""
    f = forces.forces if isinstance(forces, ForceField) else np.asarray(forces, dtype=float)
    f_c = f.sum(axis=0)
    B = jacobian_rotation(prim.pose.theta, prim.p)
    f_theta = B.reshape(-1, 4).T @ f.ravel()
    J = jacobian_global(prim.uv, prim.globals)
    f_model = f @ prim.R
    f_s = J.reshape(-1, J.shape[-1]).T @ f_model.ravel()
    if with_local:
        f_d = local_generalized_force(prim, f)
    else:
        f_d = np.zeros_like(prim.velocity.grid)
    return GeneralizedForce(f_c, f_theta, f_s, f_d)


def block_damping(prim: Primitive, weights=None) -> dict:
    """Diagonal damping per parameter block from the Gauss-Newton metric.

    With ``M_b = sum_r w_r L_b,r^T L_b,r`` the metric of block ``b`` and
    ``w_r`` the number of correspondences pulling on sample ``r`` (all ones
    by default), the translation and rotation blocks get the scalar
    ``lambda_max(M_b)``; the global block gets ``diag(M_b)`` scaled by the
    largest eigenvalue of the Jacobi-normalized metric, so a unit step is
    at the stability limit of every block. The local block uses a
    row-sum bound on the largest eigenvalue of its smoothed metric.
    """
    n = len(prim.x)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    B = jacobian_rotation(prim.pose.theta, prim.p)
    J = jacobian_global(prim.uv, prim.globals)
    rot = (B * w[:, None, None]).reshape(-1, 4).T @ B.reshape(-1, 4)
    glob = (J * w[:, None, None]).reshape(-1, 11).T @ J.reshape(-1, 11)
    # weakly observed coordinates (bend location while b1 ~ 0, say) must not
    # get unbounded steps: floor the diagonal at a fraction of lambda_max
    lam_glob = float(np.linalg.eigvalsh(glob)[-1])
    d = np.maximum(np.diag(glob), JACOBI_FLOOR * max(lam_glob, 1e-300))
    inv_sqrt = 1.0 / np.sqrt(d)
    lam_jacobi = float(np.linalg.eigvalsh(glob * inv_sqrt[:, None] * inv_sqrt[None, :])[-1])
    # Local metric S A^T W A S (S smoothing, A trilinear sampling) is bounded
    # by S diag(m) S with m = A^T w the node masses; its row sums
    # S(m * S1) bound the largest eigenvalue.
    v = prim.velocity
    mass = ld.splat_to_grid(np.repeat(w[:, None], 3, axis=1), prim.s, v.res, v.half)[..., :1]
    ones = ld.smooth_grid(np.ones_like(mass), v.sigma)
    local = float(ld.smooth_grid(mass * ones, v.sigma).max())
    return {
        "translation": float(w.sum()),
        "rotation": float(np.linalg.eigvalsh(rot)[-1]),
        "global": lam_jacobi * d,
        "local": local,
    }


def loss_components(gf: GeneralizedForce) -> dict:
    """Squared norms of the four generalized-force blocks and their sum."""
    comps = {
        "L_trans": float(gf.f_c @ gf.f_c),
        "L_rot": float(gf.f_theta @ gf.f_theta),
        "L_glob": float(gf.f_s @ gf.f_s),
        "L_loc": float(np.sum(gf.f_d**2)),
    }
    comps["L_gen"] = sum(comps.values())
    return comps


def total_loss(L_ext: float, L_gen: float, lambda_ext: float = 1.0, lambda_gen: float = 1.0) -> float:
    return lambda_ext * L_ext + lambda_gen * L_gen
