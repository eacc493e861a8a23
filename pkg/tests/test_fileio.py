import struct

import numpy as np
import pytest

from deformprim import fileio
from deformprim import local_deform as ld
from deformprim.errors import EmptyShape, ParseError, SchemaVersionMismatch
from deformprim.geometry import GlobalParams, superquadric_surface, uv_grid
from deformprim.kinematics import Pose
from deformprim.forces import TargetCloud
from deformprim.primitive import Primitive, required_half
from deformprim.synth import box_mesh

CUBE_V, CUBE_F = box_mesh((0, 0, 0), (0.5, 0.5, 0.5))


def write_cube_obj(path, quads=True):
    lines = [f"v {x} {y} {z}" for x, y, z in CUBE_V]
    if quads:
        quad_faces = [[1, 4, 3, 2], [5, 6, 7, 8], [1, 2, 6, 5], [3, 4, 8, 7], [2, 3, 7, 6], [1, 5, 8, 4]]
        lines += ["f " + " ".join(map(str, q)) for q in quad_faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in CUBE_F]
    path.write_text("\n".join(lines) + "\n")


def random_primitive(rng):
    g = GlobalParams(a0=0.8, a1=1.1, eps1=0.6, eps2=1.3, t1=0.2, b1=0.1, b2=0.05, b3=0.5)
    v = ld.VelocityField(0.02 * rng.normal(size=(16, 16, 16, 3)), required_half(g))
    q = rng.normal(size=4)
    return Primitive(Pose(rng.normal(size=3), q / np.linalg.norm(q)), g, v, uv_grid(8, 8))


def test_obj_quads_are_triangulated(tmp_path):
    p = tmp_path / "cube.obj"
    write_cube_obj(p)
    shape = fileio.read_obj(p)
    assert shape.format == "obj"
    assert shape.vertices.shape == (8, 3)
    assert shape.faces.shape == (12, 3)


def test_obj_bad_face_index_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(ParseError) as exc:
        fileio.read_obj(p)
    assert exc.value.line == 4
    assert ":4" in str(exc.value)


def test_obj_negative_indices_and_groups(tmp_path):
    p = tmp_path / "g.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\ng part\nf -3 -2 -1\n")
    shape = fileio.read_obj(p)
    np.testing.assert_array_equal(shape.faces, [[0, 1, 2]])
    assert shape.groups == {"part": [0]}


def test_ascii_and_binary_ply(tmp_path):
    header = "ply\nformat {fmt} 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n" \
             "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
    a = tmp_path / "a.ply"
    a.write_text(header.format(fmt="ascii") + "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    b = tmp_path / "b.ply"
    body = struct.pack("<9f", 0, 0, 0, 1, 0, 0, 0, 1, 0) + struct.pack("<B3i", 3, 0, 1, 2)
    b.write_bytes(header.format(fmt="binary_little_endian").encode() + body)
    for p in (a, b):
        shape = fileio.read_ply(p)
        np.testing.assert_allclose(shape.vertices, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        np.testing.assert_array_equal(shape.faces, [[0, 1, 2]])


def test_truncated_ply(tmp_path):
    p = tmp_path / "t.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n")
    with pytest.raises(ParseError):
        fileio.read_ply(p)


def test_xyz_is_used_as_is(tmp_path):
    pts = np.random.default_rng(0).normal(size=(500, 3))
    p = tmp_path / "pts.xyz"
    fileio.write_xyz(p, pts)
    target = fileio.load_target(p, samples=2000)
    np.testing.assert_array_equal(target.points, pts)
    sub = fileio.load_target(p, samples=100, seed=3)
    assert len(sub) == 100


def test_empty_and_unknown_files(tmp_path):
    p = tmp_path / "empty.xyz"
    p.write_text("# nothing\n")
    with pytest.raises(EmptyShape):
        fileio.read_shape(p)
    with pytest.raises(ParseError):
        fileio.read_shape(tmp_path / "x.stl")


def test_area_weighted_sampling_statistics(tmp_path):
    p = tmp_path / "cube.obj"
    write_cube_obj(p, quads=False)
    shape = fileio.read_shape(p)
    pts = fileio.sample_surface(shape.vertices, shape.faces, 6000, seed=0)
    # assign each sample to its cube face by the dominant coordinate
    axis = np.abs(pts).argmax(axis=1)
    face = 2 * axis + (pts[np.arange(len(pts)), axis] > 0)
    counts = np.bincount(face, minlength=6)
    sigma = np.sqrt(6000 * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - 1000) < 3 * sigma)
    np.testing.assert_allclose(np.abs(pts).max(axis=1), 0.5, atol=1e-12)


def test_sampling_is_deterministic(tmp_path):
    a = fileio.sample_surface(CUBE_V, CUBE_F, 100, seed=4)
    b = fileio.sample_surface(CUBE_V, CUBE_F, 100, seed=4)
    np.testing.assert_array_equal(a, b)


def test_sphere_export_radius_and_groups(tmp_path):
    prims = [Primitive.sphere((0, 0, 0), 1.0), Primitive.sphere((3, 0, 0), 0.5)]
    p = tmp_path / "m.obj"
    fileio.export_mesh(prims, p, (32, 32))
    shape = fileio.read_obj(p)
    assert sorted(shape.groups) == ["primitive_0", "primitive_1"]
    first = shape.faces[shape.groups["primitive_0"]]
    radii = np.linalg.norm(shape.vertices[np.unique(first)], axis=1)
    np.testing.assert_allclose(radii, 1.0, atol=1e-6)


def test_exported_mesh_is_watertight():
    prim = random_primitive(np.random.default_rng(1))
    _, tris = fileio.primitive_mesh(prim, 12, 16)
    edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_exported_mesh_resamples_close_to_surface():
    g = GlobalParams(a0=1.0, eps1=0.8, eps2=0.8)
    prim = Primitive(Pose.identity(), g, ld.VelocityField.zeros(required_half(g)), uv_grid(8, 8))
    dense = TargetCloud(superquadric_surface(uv_grid(600, 600), g))
    errors = []
    for n in (16, 32):
        v, f = fileio.primitive_mesh(prim, n, n)
        d, _ = dense.nearest(fileio.sample_surface(v, f, 4000, seed=0))
        errors.append(d.mean())
        # chord deviation of a unit-size surface is of order (grid step)**2
        assert d.mean() < (np.pi / n) ** 2
    assert errors[1] < errors[0]


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    prims = [random_primitive(rng), random_primitive(rng)]
    p = tmp_path / "params.json"
    fileio.save_params(prims, p, config={"seed": 7}, loss_summary={"L_ext": 1.5})
    loaded, config, summary = fileio.load_params(p)
    assert config == {"seed": 7} and summary == {"L_ext": 1.5}
    for a, b in zip(prims, loaded):
        np.testing.assert_array_equal(a.pose.c, b.pose.c)
        np.testing.assert_array_equal(a.pose.theta, b.pose.theta)
        assert a.globals == b.globals
        np.testing.assert_array_equal(a.velocity.grid, b.velocity.grid)
        np.testing.assert_allclose(a.x, b.x, atol=1e-9)


def test_params_missing_svf_and_version(tmp_path):
    doc = fileio.params_document([random_primitive(np.random.default_rng(0))])
    del doc["primitives"][0]["svf"]
    with pytest.raises(ParseError, match=r"primitives\[0\]\.svf"):
        fileio.params_from_document(doc)
    doc = fileio.params_document([])
    doc["version"] = 2
    with pytest.raises(SchemaVersionMismatch):
        fileio.params_from_document(doc)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParseError):
        fileio.load_params(bad)


def test_loss_csv(tmp_path):
    from deformprim.fitting import StepRecord

    recs = [StepRecord(iter=i, L_ext=1.0 / (i + 1), L_trans=0, L_rot=0, L_glob=0, L_loc=0, chamfer=0.1) for i in range(3)]
    p = tmp_path / "loss.csv"
    fileio.write_loss_csv(p, recs)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(fileio.LOSS_CSV_FIELDS)
    assert len(lines) == 4


def test_atomic_write_leaves_no_temp_files(tmp_path):
    fileio.atomic_write_text(tmp_path / "a.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
