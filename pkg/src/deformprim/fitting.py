"""Force-driven fitting of several deformable primitives to a target cloud.

The dynamics are first order, ``dq/dt = f_q``, integrated with explicit
Euler steps. Parameter blocks are unlocked in stages (pose, then global
deformation, then local deformation).
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial import cKDTree
from sklearn.mixture import GaussianMixture

from . import local_deform as ld
from .errors import DegenerateTarget, EmptyAssignment
from .forces import (
    CLIP_FACTOR,
    ForceField,
    GeneralizedForce,
    TargetCloud,
    block_damping,
    clip_distance_for,
    correspondences,
    external_forces,
    generalized_forces,
    loss_components,
    total_loss,
)
from .geometry import GlobalParams, equiangular_uv, project_global_array, uv_grid
from .kinematics import Pose
from .primitive import Primitive, required_half

log = logging.getLogger(__name__)

BLOCK_GROUPS = ("pose", "global", "local")


@dataclass
class FittingConfig:
    """Knobs of the dynamic fit.

    ``step_size`` is the dimensionless base step; each parameter block takes
    the Euler step ``step_size / (gamma * damping)`` with the damping read
    off the block's Gauss-Newton metric, so ``step_size = 1`` sits at the
    stability limit of the linearized dynamics. ``stage_iters`` gives the length of
    the rigid, +global and +local stages; ``blocks`` restricts which groups
    may ever be unlocked. A stage also ends early once ``L_ext`` improved by
    less than ``plateau_rtol`` (relative) over the last ``plateau_window``
    iterations; ``plateau_window = 0`` disables this. With ``equiangular``
    the ``nu x nv`` angle grid is re-spaced every ``resample_every``
    iterations to suit the current exponents, so the samples stay evenly
    spread over boxy shapes (see :func:`~deformprim.geometry.equiangular_uv`).
    ``init`` picks the clustering that places the initial spheres.
    """

    num_primitives: int = 1
    step_size: float = 1.0
    max_iters: int = 2500
    gamma: float = 1.0
    lambda_ext: float = 1.0
    lambda_gen: float = 1.0
    stage_iters: tuple = (500, 1000, 1000)
    blocks: tuple = BLOCK_GROUPS
    tol: float = 1e-9
    seed: int = 0
    nu: int = 32
    nv: int = 32
    svf_res: int = ld.DEFAULT_RES
    svf_sigma: float = ld.DEFAULT_SIGMA
    ss_steps: int = ld.DEFAULT_STEPS
    attract: bool = True
    coverage: bool = True
    coverage_weight: float = 1.0
    clip: float = CLIP_FACTOR
    step_halving: bool = True
    max_halvings: int = 10
    init_bend_influence: float = 0.5
    init: str = "gmm"
    equiangular: bool = True
    resample_every: int = 10
    plateau_window: int = 50
    plateau_rtol: float = 1e-3
    threads: int = 1

    def __post_init__(self):
        self.stage_iters = tuple(int(n) for n in self.stage_iters)
        self.blocks = tuple(self.blocks)
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.num_primitives < 1:
            raise ValueError("num_primitives must be >= 1")
        if self.init not in ("gmm", "kmeans"):
            raise ValueError(f"unknown init {self.init!r}; use 'gmm' or 'kmeans'")
        unknown = set(self.blocks) - set(BLOCK_GROUPS)
        if unknown:
            raise ValueError(f"unknown block groups {sorted(unknown)}")

    def unlocked(self, it: int) -> frozenset:
        """Block groups free to move at iteration ``it``."""
        stage = 0
        edge = 0
        for k, n in enumerate(self.stage_iters):
            edge += n
            stage = k
            if it < edge:
                break
        else:
            stage = len(self.stage_iters) - 1
        return frozenset(BLOCK_GROUPS[: stage + 1]) & frozenset(self.blocks)

    def next_stage_start(self, it: int):
        """First iteration after ``it`` whose unlocked set differs, or None."""
        current = self.unlocked(it)
        edge = 0
        for n in self.stage_iters:
            edge += n
            if edge > it and self.unlocked(edge) != current:
                return edge
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_iters"] = list(self.stage_iters)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FittingConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown fitting config keys: {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# initialization and assignment
# ---------------------------------------------------------------------------

def _new_primitive(center, radius, cfg: FittingConfig) -> Primitive:
    g = GlobalParams(a0=max(radius, 1e-3), b3=cfg.init_bend_influence)
    v = ld.VelocityField.zeros(required_half(g), cfg.svf_res, cfg.svf_sigma)
    return Primitive(Pose.identity(center), g, v, uv_grid(cfg.nu, cfg.nv), cfg.ss_steps)


def initialize(target: TargetCloud, P: int, seed: int = 0, cfg: FittingConfig | None = None) -> list:
    """Place ``P`` small spheres at the centers of a clustering of the target.

    With ``cfg.init == "kmeans"`` the clusters come from k-means++. The
    default ``"gmm"`` refines those into a full-covariance Gaussian mixture,
    whose elongated components follow thin parts (legs, slabs) much better
    than isotropic k-means cells do. Each sphere's radius is half the RMS
    distance of its cluster's points to the center.
    """
    cfg = cfg or FittingConfig(num_primitives=P, seed=seed)
    pts = target.points
    if len(np.unique(pts, axis=0)) < P:
        raise DegenerateTarget(f"target has fewer than {P} distinct points")
    if P == 1:
        centers = pts.mean(axis=0, keepdims=True)
        labels = np.zeros(len(pts), dtype=int)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centers, labels = kmeans2(pts, P, iter=50, minit="++", seed=np.random.default_rng(seed))
            if cfg.init == "gmm":
                gmm = GaussianMixture(P, covariance_type="full", means_init=centers, random_state=seed,
                                      max_iter=500, tol=1e-6).fit(pts)
                labels = gmm.predict(pts)
                centers = np.array([pts[labels == k].mean(axis=0) if np.any(labels == k) else centers[k]
                                    for k in range(P)])
    prims = []
    for k in range(P):
        members = pts[labels == k]
        if len(members) == 0:
            # empty cluster: fall back to the farthest point from all centers
            _, far = cKDTree(centers).query(pts)
            members = pts[[int(np.argmax(far))]]
            centers[k] = members[0]
        rms = float(np.sqrt(np.mean(np.sum((members - centers[k]) ** 2, axis=1))))
        if rms <= 0:
            rms = 1e-2 * max(target.bbox_diagonal, 1e-3)
        prims.append(_new_primitive(centers[k], 0.5 * rms, cfg))
    return prims


def assign(target: TargetCloud, prims: list) -> np.ndarray:
    """Index of the primitive owning each target point's nearest surface sample."""
    owner, _, _ = _assign_with_distances(target, prims)
    return owner


def _assign_with_distances(target: TargetCloud, prims: list):
    allx = np.concatenate([p.x for p in prims])
    owners = np.repeat(np.arange(len(prims)), [len(p.x) for p in prims])
    dist, idx = cKDTree(allx).query(target.points)
    return owners[idx], dist, allx


def reseed_empty(target: TargetCloud, prims: list, owner: np.ndarray, cfg: FittingConfig) -> list:
    """Move primitives that own no target points to the worst-covered target point."""
    counts = np.bincount(owner, minlength=len(prims))
    if np.all(counts > 0):
        return prims
    out = list(prims)
    _, dist, _ = _assign_with_distances(target, prims)
    dist = dist.copy()
    for k in np.flatnonzero(counts == 0):
        j = int(np.argmax(dist))
        radius = max(0.5 * float(dist[j]), 1e-2 * target.bbox_diagonal)
        out[k] = _new_primitive(target.points[j], radius, cfg)
        # do not stack two re-seeded primitives on the same point
        dist[np.linalg.norm(target.points - target.points[j], axis=1) < 2 * radius] = 0.0
    return out


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    """Forces and losses of a full primitive set against the target."""

    owner: np.ndarray
    fields: list
    L_ext: float
    chamfer: float
    n_active: list
    clip_distance: float | None = None

    @property
    def empty(self) -> list:
        return [k for k, f in enumerate(self.fields) if f is None]


def evaluate(prims: list, target: TargetCloud, cfg: FittingConfig, pool=None,
             clip_distance: float | None = None) -> Evaluation:
    """Assign target points, then compute each primitive's forces and loss.

    ``clip_distance`` fixes the correspondence cap; when None each
    primitive derives its own from its median correspondence distance.
    """
    owner, d_t, allx = _assign_with_distances(target, prims)
    d_m, _ = target.nearest(allx)
    chamfer = 0.5 * (float(d_t.mean()) + float(d_m.mean()))

    def one(k):
        sub = target.points[owner == k]
        if len(sub) == 0:
            return None, 0
        ff = external_forces(
            prims[k], TargetCloud(sub), cfg.gamma,
            attract=cfg.attract, coverage=cfg.coverage,
            coverage_weight=cfg.coverage_weight, clip=cfg.clip, clip_distance=clip_distance,
        )
        n = (len(prims[k].x) if cfg.attract else 0) + (cfg.coverage_weight * len(sub) if cfg.coverage else 0)
        return ff, n

    results = list(pool.map(one, range(len(prims)))) if pool else [one(k) for k in range(len(prims))]
    fields_ = [r[0] for r in results]
    L_ext = float(sum(f.loss for f in fields_ if f is not None))
    return Evaluation(owner, fields_, L_ext, chamfer, [r[1] for r in results], clip_distance)


def fit_clip_distance(prims: list, target: TargetCloud, cfg: FittingConfig) -> float:
    """``cfg.clip`` times the median correspondence distance over all primitives."""
    if not np.isfinite(cfg.clip):
        return np.inf
    owner, _, _ = _assign_with_distances(target, prims)
    dists = []
    for k, prim in enumerate(prims):
        sub = target.points[owner == k]
        if len(sub):
            pairs = correspondences(prim, TargetCloud(sub), cfg.attract, cfg.coverage and cfg.coverage_weight != 0)
            dists.extend(d for _, _, d in pairs)
    return clip_distance_for(np.concatenate(dists), cfg.clip) if dists else np.inf


def _zero_gf(prim: Primitive) -> GeneralizedForce:
    return GeneralizedForce(np.zeros(3), np.zeros(4), np.zeros(11), np.zeros_like(prim.velocity.grid))


def update_primitive(prim: Primitive, gf: GeneralizedForce, h, unlocked) -> Primitive:
    """One explicit Euler step ``q <- q + h f_q`` on the unlocked blocks.

    ``h`` is a scalar or a dict of per-block steps keyed like
    :func:`block_damping` (the global entry may be a per-coordinate array).
    """
    if not isinstance(h, dict):
        h = dict.fromkeys(("translation", "rotation", "global", "local"), h)
    c, theta = prim.pose.c, prim.pose.theta
    g = prim.globals
    vel = prim.velocity
    if "pose" in unlocked:
        c = c + h["translation"] * gf.f_c
        theta = theta + h["rotation"] * gf.f_theta
        theta = theta / np.linalg.norm(theta)
    if "global" in unlocked:
        g = project_global_array(g.to_array() + h["global"] * gf.f_s)
    if "local" in unlocked and np.any(gf.f_d):
        grid = vel.grid + h["local"] * gf.f_d
        peak = float(np.max(np.linalg.norm(ld.smooth_grid(grid, vel.sigma), axis=-1)))
        if peak > vel.cap:
            grid = grid * (vel.cap / peak)
        vel = ld.VelocityField(grid, vel.half, vel.sigma)
    else:
        vel = vel.copy()
    return Primitive(Pose(c, theta), g, vel, prim.uv, prim.steps)


@dataclass
class StepRecord:
    iter: int
    L_ext: float
    L_trans: float
    L_rot: float
    L_glob: float
    L_loc: float
    chamfer: float
    L_gen: float = 0.0
    L_total: float = 0.0
    step: float = 0.0
    halvings: int = 0
    accepted: bool = True
    event: str = ""
    unlocked: tuple = ()

    CSV_FIELDS = ("iter", "L_ext", "L_trans", "L_rot", "L_glob", "L_loc", "chamfer")


def _generalized(prims, ev: Evaluation, cfg: FittingConfig, unlocked, pool=None):
    def one(k):
        ff = ev.fields[k]
        if ff is None:
            return _zero_gf(prims[k])
        return generalized_forces(prims[k], ff, with_local="local" in unlocked)

    if pool:
        return list(pool.map(one, range(len(prims))))
    return [one(k) for k in range(len(prims))]


def step(prims: list, target: TargetCloud, cfg: FittingConfig, it: int = 0,
         ev: Evaluation | None = None, pool=None):
    """Advance the primitive set by one accepted (or rejected) Euler step.

    Returns ``(prims, evaluation, record)``. Each block of each primitive
    steps by ``step_size / (gamma * damping)``, see
    :func:`~deformprim.forces.block_damping`. With step halving enabled a
    trial step that raises the total external loss is retried with the
    steps of the offending primitives halved; a primitive halved more than
    ``max_halvings`` times keeps its old state. When every primitive is past
    that limit the state is left unchanged and the record is marked not
    accepted.
    """
    if ev is None:
        ev = evaluate(prims, target, cfg, pool)
    unlocked = cfg.unlocked(it)
    gfs = _generalized(prims, ev, cfg, unlocked, pool)
    comps = [loss_components(gf) for gf in gfs]
    agg = {k: float(sum(c[k] for c in comps)) for k in ("L_trans", "L_rot", "L_glob", "L_loc", "L_gen")}

    # per-block base steps: step_size over the block's damping
    base = []
    for k, prim in enumerate(prims):
        ff = ev.fields[k]
        if ff is None or not unlocked:
            base.append(None)
            continue
        damp = block_damping(prim, ff.weights)
        base.append({b: cfg.step_size / (cfg.gamma * np.maximum(c, 1e-12)) for b, c in damp.items()})

    def trial_state(scales):
        trial = list(prims)
        for k, s in enumerate(scales):
            if base[k] is not None and s > 0:
                h = {b: s * v for b, v in base[k].items()}
                trial[k] = update_primitive(prims[k], gfs[k], h, unlocked)
        return trial

    def own_loss(e: Evaluation):
        return np.array([0.0 if f is None else f.loss for f in e.fields])

    # Step halving per primitive: when the total loss rises, only the
    # primitives whose own loss rose take a smaller step (all of them when
    # no single one is to blame). A primitive past max_halvings stays put.
    scales = np.ones(len(prims))
    halvings = 0
    accepted = False
    new_prims, new_ev = prims, ev
    old_own = own_loss(ev)
    while True:
        if cfg.step_halving and not np.any(scales > 0):
            # every primitive is past max_halvings: the trial would be the
            # unchanged state, so report a stall
            break
        trial = trial_state(scales)
        trial_ev = evaluate(trial, target, cfg, pool, ev.clip_distance)
        if not cfg.step_halving or trial_ev.L_ext <= ev.L_ext:
            new_prims, new_ev, accepted = trial, trial_ev, True
            break
        blame = (own_loss(trial_ev) > old_own) & (scales > 0)
        if not np.any(blame):
            blame = scales > 0
        scales[blame] *= 0.5
        scales[scales < 0.5**cfg.max_halvings] = 0.0
        halvings += 1
    scale = float(scales.max())
    event = ""

    rec = StepRecord(
        iter=it, L_ext=new_ev.L_ext, chamfer=new_ev.chamfer,
        L_gen=agg["L_gen"], L_total=total_loss(new_ev.L_ext, agg["L_gen"], cfg.lambda_ext, cfg.lambda_gen),
        L_trans=agg["L_trans"], L_rot=agg["L_rot"], L_glob=agg["L_glob"], L_loc=agg["L_loc"],
        step=scale * cfg.step_size, halvings=halvings, accepted=accepted,
        event=event, unlocked=tuple(b for b in BLOCK_GROUPS if b in unlocked),
    )
    return new_prims, new_ev, rec


@dataclass
class FitResult:
    primitives: list
    history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    reason: str = ""

    @property
    def final_loss(self) -> float:
        return self.history[-1].L_ext if self.history else float("nan")

    def loss_summary(self) -> dict:
        last = self.history[-1] if self.history else None
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
            "L_ext": None if last is None else last.L_ext,
            "chamfer": None if last is None else last.chamfer,
        }


RESEED_RETRY = 50


def fit(target: TargetCloud, cfg: FittingConfig, prims: list | None = None, callback=None) -> FitResult:
    """Run the staged dynamic fit from k-means++ sphere initialization.

    Stops after ``cfg.max_iters`` iterations, when the external loss drops
    below ``cfg.tol``, or when no step size decreases the loss. The returned
    state is the best seen (with step halving, always the last accepted one).
    """
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        return _fit(target, cfg, prims, callback, pool)
    finally:
        if pool:
            pool.shutdown()


def _fit(target, cfg, prims, callback, pool) -> FitResult:
    if prims is None:
        prims = initialize(target, cfg.num_primitives, cfg.seed, cfg)
    # the correspondence cap is frozen for the whole fit so that losses of
    # different iterations measure the same potential
    delta = fit_clip_distance(prims, target, cfg)
    ev = evaluate(prims, target, cfg, pool, delta)
    if ev.empty:
        prims, ev = _try_reseed(prims, ev, target, cfg, pool, force=True)
    init_comps = _initial_record(prims, ev, cfg, pool)
    history = [init_comps]
    best = (ev.L_ext, prims)
    result = FitResult(prims, history)
    # ``clock`` positions the fit in the stage schedule; it runs ahead of the
    # step count when a stage is cut short
    it = clock = 0
    stage_losses = [ev.L_ext]
    result.reason = "max_iters"
    while it < cfg.max_iters:
        if ev.L_ext <= cfg.tol:
            break
        prims, ev, rec = step(prims, target, cfg, clock, ev, pool)
        it += 1
        clock += 1
        rec.iter = it
        history.append(rec)
        if callback:
            callback(rec, prims)
        if ev.L_ext < best[0]:
            best = (ev.L_ext, prims)
        if ev.empty and it % RESEED_RETRY == 0:
            prims, ev = _try_reseed(prims, ev, target, cfg, pool)
        if cfg.equiangular and cfg.resample_every > 0 and it % cfg.resample_every == 0:
            prims, ev = _try_resample(prims, ev, target, cfg, pool)
        stage_losses.append(ev.L_ext)
        reason = None
        if not rec.accepted:
            # a rejected step leaves the state unchanged and would be rejected
            # again, so move on to the next stage (or stop in the last one)
            reason = "stalled"
        elif _plateaued(stage_losses, cfg):
            reason = "plateau"
        if reason:
            nxt = cfg.next_stage_start(clock - 1)
            if nxt is None:
                result.reason = reason
                break
            log.debug("stage advanced after %d steps (%s)", it, reason)
            clock = nxt
        if reason or cfg.unlocked(clock) != cfg.unlocked(clock - 1):
            stage_losses = [ev.L_ext]
    if ev.L_ext <= cfg.tol:
        result.converged, result.reason = True, "tolerance"
    if not cfg.step_halving and best[0] < ev.L_ext:
        prims = best[1]
    result.primitives = prims
    result.iterations = len(history) - 1
    if not result.converged:
        log.info("fit stopped without reaching tolerance (%s) at L_ext=%.6g", result.reason, ev.L_ext)
    return result


def _plateaued(losses: list, cfg: FittingConfig) -> bool:
    w = cfg.plateau_window
    if w <= 0 or len(losses) <= w:
        return False
    old, new = losses[-w - 1], losses[-1]
    return old - new <= cfg.plateau_rtol * abs(old)


def resample_uv(prim: Primitive, nu: int, nv: int) -> Primitive:
    """Same primitive, sampled on the equiangular grid for its exponents."""
    g = prim.globals
    uv = equiangular_uv(uv_grid(nu, nv), g.eps1, g.eps2)
    return Primitive(prim.pose, g, prim.velocity.copy(), uv, prim.steps)


def _try_resample(prims, ev, target, cfg, pool):
    # resampling moves samples along the surface, which the forces do not
    # see, so it is kept only when it does not raise the loss
    # (one primitive at a time)
    for k in range(len(prims)):
        candidate = list(prims)
        candidate[k] = resample_uv(prims[k], cfg.nu, cfg.nv)
        cand_ev = evaluate(candidate, target, cfg, pool, ev.clip_distance)
        if not cfg.step_halving or cand_ev.L_ext <= ev.L_ext:
            prims, ev = candidate, cand_ev
    return prims, ev


def _try_reseed(prims, ev, target, cfg, pool, force=False):
    candidate = reseed_empty(target, prims, ev.owner, cfg)
    cand_ev = evaluate(candidate, target, cfg, pool, ev.clip_distance)
    if force or not cfg.step_halving or cand_ev.L_ext <= ev.L_ext:
        return candidate, cand_ev
    return prims, ev


def _initial_record(prims, ev, cfg, pool) -> StepRecord:
    gfs = _generalized(prims, ev, cfg, frozenset(BLOCK_GROUPS), pool)
    comps = [loss_components(gf) for gf in gfs]
    agg = {k: float(sum(c[k] for c in comps)) for k in ("L_trans", "L_rot", "L_glob", "L_loc", "L_gen")}
    return StepRecord(
        iter=0, L_ext=ev.L_ext, chamfer=ev.chamfer,
        L_gen=agg["L_gen"], L_total=total_loss(ev.L_ext, agg["L_gen"], cfg.lambda_ext, cfg.lambda_gen),
        L_trans=agg["L_trans"], L_rot=agg["L_rot"], L_glob=agg["L_glob"], L_loc=agg["L_loc"],
        step=0.0, event="init",
    )
