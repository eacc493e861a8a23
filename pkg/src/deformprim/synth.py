"""Synthetic target shapes: superquadrics and unions of axis-aligned boxes."""

from __future__ import annotations

import numpy as np

from . import local_deform as ld
from .errors import UnknownGenerator
from .fileio import sphere_topology
from .geometry import GlobalParams, global_surface
from .kinematics import Pose
from .primitive import Primitive, required_half

GENERATORS = ("superquadric", "union-of-boxes", "chair-like", "l-bracket")


class Shape:
    """A closed triangle mesh with optional named parts and analytic parameters.

    ``parts`` maps part names to ``(center, half_sizes)`` boxes, when the
    shape is a union of boxes.
    """

    def __init__(self, vertices, faces, parts=None, primitive=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.parts = parts or {}
        self.primitive = primitive

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def superquadric_shape(g: GlobalParams, center=(0.0, 0.0, 0.0), nu: int = 96, nv: int = 96) -> Shape:
    uv, tris = sphere_topology(nu, nv)
    verts = global_surface(uv, g) + np.asarray(center, dtype=float)
    prim = Primitive(Pose.identity(center), g, ld.VelocityField.zeros(required_half(g)))
    return Shape(verts, tris, primitive=prim)


_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # z-
        [4, 5, 6], [4, 6, 7],  # z+
        [0, 1, 5], [0, 5, 4],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [1, 2, 6], [1, 6, 5],  # x+
        [0, 4, 7], [0, 7, 3],  # x-
    ],
    dtype=np.int64,
)


def box_mesh(center, half):
    c = np.asarray(center, dtype=float)
    h = np.asarray(half, dtype=float)
    signs = np.array(
        [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
         [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
        dtype=float,
    )
    return c + signs * h, _BOX_FACES.copy()


def boxes_shape(boxes: dict) -> Shape:
    """Union of non-overlapping axis-aligned boxes ``{name: (center, half)}``."""
    verts, faces = [], []
    for center, half in boxes.values():
        v, f = box_mesh(center, half)
        faces.append(f + sum(len(x) for x in verts))
        verts.append(v)
    return Shape(np.concatenate(verts), np.concatenate(faces), parts=dict(boxes))


def chair_boxes(seed: int = 0, jitter: float = 0.1) -> dict:
    """Seat, backrest and four legs; dimensions jittered by ``seed``.

    Parts touch but do not overlap, so the box meshes bound a valid solid.
    """
    rng = np.random.default_rng(seed)
    j = lambda: 1.0 + (jitter * rng.uniform(-1, 1) if jitter else 0.0)  # noqa: E731
    width = 1.0 * j()
    depth = 1.0 * j()
    seat_t = 0.15 * j()
    leg_h = 0.9 * j()
    leg_w = 0.15 * j()
    back_h = 1.0 * j()
    back_t = 0.15 * j()
    boxes = {
        "seat": ((0.0, 0.0, leg_h + seat_t / 2), (width / 2, depth / 2, seat_t / 2)),
        "back": (
            (0.0, depth / 2 - back_t / 2, leg_h + seat_t + back_h / 2),
            (width / 2, back_t / 2, back_h / 2),
        ),
    }
    for name, sx, sy in (("leg_fl", -1, -1), ("leg_fr", 1, -1), ("leg_bl", -1, 1), ("leg_br", 1, 1)):
        cx = sx * (width / 2 - leg_w / 2)
        cy = sy * (depth / 2 - leg_w / 2)
        boxes[name] = ((cx, cy, leg_h / 2), (leg_w / 2, leg_w / 2, leg_h / 2))
    return {k: (np.asarray(c, float), np.asarray(h, float)) for k, (c, h) in boxes.items()}


def l_bracket_boxes(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    length = 1.0 + 0.1 * rng.uniform(-1, 1)
    t = 0.2 + 0.02 * rng.uniform(-1, 1)
    return {
        "base": (np.array([length / 2, 0.0, t / 2]), np.array([length / 2, 0.3, t / 2])),
        "upright": (np.array([t / 2, 0.0, t + length / 2]), np.array([t / 2, 0.3, length / 2])),
    }


def random_boxes(seed: int = 0, count: int = 3) -> dict:
    """Boxes stacked along z with random footprints, touching face to face."""
    rng = np.random.default_rng(seed)
    boxes = {}
    z = 0.0
    for k in range(count):
        half = rng.uniform(0.15, 0.5, 3)
        xy = rng.uniform(-0.2, 0.2, 2)
        boxes[f"box_{k}"] = (np.array([xy[0], xy[1], z + half[2]]), half)
        z += 2 * half[2]
    return boxes


def generate(name: str, seed: int = 0, params: GlobalParams | None = None) -> Shape:
    if name == "superquadric":
        return superquadric_shape(params or GlobalParams())
    if name == "union-of-boxes":
        return boxes_shape(random_boxes(seed))
    if name == "chair-like":
        return boxes_shape(chair_boxes(seed))
    if name == "l-bracket":
        return boxes_shape(l_bracket_boxes(seed))
    raise UnknownGenerator(f"unknown generator {name!r}; choose from {', '.join(GENERATORS)}")
