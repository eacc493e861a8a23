import numpy as np
import pytest

from deformprim.errors import UnknownGenerator
from deformprim.geometry import GlobalParams
from deformprim.metrics import VoxelGrid, bounds_for, mesh_occupancy
from deformprim.synth import GENERATORS, chair_boxes, generate


@pytest.mark.parametrize("name", GENERATORS)
def test_generators_give_closed_meshes(name):
    shape = generate(name, seed=3)
    edges = np.sort(np.concatenate([shape.faces[:, [0, 1]], shape.faces[:, [1, 2]], shape.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)
    assert shape.bbox_diagonal > 0


def test_chair_has_six_touching_parts():
    boxes = chair_boxes(seed=7)
    assert sorted(boxes) == ["back", "leg_bl", "leg_br", "leg_fl", "leg_fr", "seat"]
    seat_c, seat_h = boxes["seat"]
    for name in ("leg_fl", "leg_fr", "leg_bl", "leg_br"):
        c, h = boxes[name]
        assert c[2] + h[2] == pytest.approx(seat_c[2] - seat_h[2])


def test_chair_volume_matches_voxels():
    shape = generate("chair-like", seed=0)
    vol = sum(np.prod(2 * h) for _, h in shape.parts.values())
    lo, hi = bounds_for(shape.vertices)
    grid = VoxelGrid(lo, hi, 64)
    occ = mesh_occupancy(shape.vertices, shape.faces, grid)
    assert occ.occupancy.sum() * np.prod(grid.voxel_size) == pytest.approx(vol, rel=0.05)


def test_analytic_superquadric_keeps_params():
    g = GlobalParams(eps1=0.5, eps2=1.2, t1=0.3, b1=0.2, b3=0.5)
    shape = generate("superquadric", params=g)
    assert shape.primitive.globals == g
    np.testing.assert_allclose(shape.primitive.world_points(np.array([[0.3, 0.4]])).shape, (1, 3))


def test_seeded_generators_are_deterministic():
    a, b = generate("chair-like", seed=7), generate("chair-like", seed=7)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    assert not np.array_equal(a.vertices, generate("chair-like", seed=8).vertices)


def test_unknown_generator():
    with pytest.raises(UnknownGenerator):
        generate("teapot")
