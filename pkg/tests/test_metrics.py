import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deformprim.errors import EmptySet, EmptyUnion
from deformprim.fileio import primitive_mesh
from deformprim.geometry import GlobalParams, uv_grid
from deformprim.kinematics import Pose
from deformprim import local_deform as ld
from deformprim.metrics import (
    VoxelGrid,
    bounds_for,
    chamfer_l1,
    evaluate,
    iou,
    mesh_occupancy,
    points_in_mesh,
    primitive_occupancy,
    primitives_occupancy,
)
from deformprim.primitive import Primitive, required_half
from deformprim.synth import box_mesh, superquadric_shape


def brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


@given(st.integers(0, 10_000))
def test_chamfer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3)) + 0.3
    assert abs(chamfer_l1(a, b) - brute_chamfer(a, b)) < 1e-12
    assert chamfer_l1(a, b) == chamfer_l1(b, a)


def test_chamfer_trivial_cases():
    a = np.random.default_rng(0).normal(size=(30, 3))
    assert chamfer_l1(a, a) == 0.0
    assert chamfer_l1([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    with pytest.raises(EmptySet):
        chamfer_l1(np.zeros((0, 3)), a)


def sphere(radius, center=(0, 0, 0)):
    g = GlobalParams(a0=radius)
    return Primitive(Pose.identity(center), g, ld.VelocityField.zeros(required_half(g)), uv_grid(16, 16))


def test_sphere_vs_doubled_sphere_iou_is_one_eighth():
    small, big = sphere(1.0), sphere(2.0)
    lo, hi = bounds_for(big.x)
    grid = VoxelGrid(lo, hi, 64)
    target = primitives_occupancy([big], grid)
    assert iou([small], target) == pytest.approx(1 / 8, abs=0.02)


def test_iou_identity_disjoint_and_empty():
    v, f = box_mesh((0, 0, 0), (1, 1, 1))
    grid = VoxelGrid(np.full(3, -3.0), np.full(3, 3.0), 32)
    occ = mesh_occupancy(v, f, grid)
    assert iou(occ, occ) == 1.0
    v2, f2 = box_mesh((2, 2, 2), (0.5, 0.5, 0.5))
    assert iou(mesh_occupancy(v2, f2, grid), occ) == 0.0
    empty = grid.with_occupancy(np.zeros((32, 32, 32)))
    with pytest.raises(EmptyUnion):
        iou(empty, empty)


def test_iou_invariant_under_rigid_motion():
    g = GlobalParams(a0=0.8, a1=1.3, eps1=0.4, eps2=0.6, t1=0.2)
    q = np.array([0.9, 0.2, -0.3, 0.25])
    q /= np.linalg.norm(q)
    a = Primitive(Pose.identity(), g, ld.VelocityField.zeros(required_half(g)), uv_grid(24, 24))
    b = Primitive(Pose.identity((0.2, 0, 0)), g.replace(a0=0.7), ld.VelocityField.zeros(required_half(g)), uv_grid(24, 24))
    shift = np.array([0.3, -0.5, 1.0])

    def moved(p):
        return Primitive(Pose(shift + _rot(q) @ p.pose.c, q), p.globals, p.velocity.copy(), p.uv)

    def score(prims_a, prims_b):
        va, fa = primitive_mesh(prims_a[0], 48, 48)
        lo, hi = bounds_for(va, prims_b[0].x)
        return iou(prims_b, mesh_occupancy(va, fa, VoxelGrid(lo, hi, 64)))

    assert score([moved(a)], [moved(b)]) == pytest.approx(score([a], [b]), abs=0.02)


def _rot(q):
    return Pose(np.zeros(3), q).R


def test_box_mesh_occupancy_matches_analytic_box(rng):
    v, f = box_mesh((0.1, -0.2, 0.3), (0.5, 0.3, 0.4))
    pts = rng.uniform(-1, 1, size=(5000, 3))
    inside = np.all(np.abs(pts - [0.1, -0.2, 0.3]) < [0.5, 0.3, 0.4], axis=1)
    np.testing.assert_array_equal(points_in_mesh(v, f, pts), inside)


def test_primitive_occupancy_against_ray_cast_oracle(rng):
    g = GlobalParams(a0=0.9, a1=1.2, a2=0.8, eps1=0.5, eps2=1.3, t1=0.3, b1=0.2, b3=0.6)
    vel = ld.VelocityField(ld.smooth_grid(rng.normal(size=(16, 16, 16, 3)), 2.0), required_half(g))
    vel.grid *= 0.05 * vel.half / np.abs(vel.grid).max()
    q = np.array([0.95, 0.1, 0.2, -0.2])
    prim = Primitive(Pose((0.1, 0.2, -0.1), q / np.linalg.norm(q)), g, vel, uv_grid(16, 16))
    v, f = primitive_mesh(prim, 96, 96)
    lo, hi = bounds_for(v)
    pts = lo + (hi - lo) * rng.random((10_000, 3))
    agree = np.mean(primitive_occupancy(pts, prim) == points_in_mesh(v, f, pts))
    assert agree >= 0.99


def test_occupancy_near_surface_and_far():
    g = GlobalParams(a0=1.0, eps1=0.7, eps2=1.2, t1=0.2, b1=0.1, b3=0.4)
    prim = Primitive(Pose.identity(), g, ld.VelocityField.zeros(required_half(g)), uv_grid(12, 12))
    assert primitive_occupancy(prim.pose.c, prim)
    assert not primitive_occupancy(np.array([10.0, 10.0, 10.0]), prim)


def test_occupancy_scaled_surface_points():
    g = GlobalParams(a0=1.0, a1=1.5, eps1=0.8, eps2=0.9)
    prim = Primitive(Pose.identity(), g, ld.VelocityField.zeros(required_half(g)), uv_grid(10, 10))
    assert np.all(primitive_occupancy(0.99 * prim.x, prim))
    assert not np.any(primitive_occupancy(1.01 * prim.x, prim))


def test_evaluate_reports_per_primitive():
    shape = superquadric_shape(GlobalParams(a0=0.5))
    prims = [sphere(0.5)]
    m = evaluate(prims, shape.vertices, (shape.vertices, shape.faces), res=32)
    assert m["iou"] == pytest.approx(1.0, abs=0.05)
    assert m["chamfer_l1"] < 0.02
    assert m["per_primitive"][0]["assigned_points"] == len(shape.vertices)
