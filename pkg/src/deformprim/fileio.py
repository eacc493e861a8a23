"""Shape ingestion (OBJ/PLY/XYZ), primitive mesh export, and parameter files."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import local_deform as ld
from .errors import EmptyShape, ParseError, SchemaVersionMismatch
from .forces import TargetCloud
from .geometry import PARAM_NAMES, GlobalParams
from .kinematics import Pose
from .primitive import Primitive

SCHEMA_NAME = "deformprim.params"
SCHEMA_VERSION = 1
LOSS_CSV_FIELDS = ("iter", "L_ext", "L_trans", "L_rot", "L_glob", "L_loc", "chamfer")


@dataclass
class ShapeFile:
    format: str
    vertices: np.ndarray
    faces: np.ndarray | None = None
    groups: dict = field(default_factory=dict)

    @property
    def has_faces(self) -> bool:
        return self.faces is not None and len(self.faces) > 0


# ---------------------------------------------------------------------------
# readers
# ---------------------------------------------------------------------------

def _obj_index(token: str, n_vertices: int, path, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ParseError(f"bad face index {token!r}", path, lineno) from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise ParseError(f"face index {token!r} out of range (have {n_vertices} vertices)", path, lineno)
    return idx


def read_obj(path) -> ShapeFile:
    verts, faces = [], []
    groups: dict = {}
    current = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            key = parts[0]
            if key == "v":
                try:
                    verts.append([float(t) for t in parts[1:4]])
                except ValueError:
                    raise ParseError(f"bad vertex {line.strip()!r}", path, lineno) from None
                if len(verts[-1]) != 3:
                    raise ParseError("vertex needs 3 coordinates", path, lineno)
            elif key == "f":
                idx = [_obj_index(t, len(verts), path, lineno) for t in parts[1:]]
                if len(idx) < 3:
                    raise ParseError("face needs at least 3 vertices", path, lineno)
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    if current is not None:
                        groups.setdefault(current, []).append(len(faces))
                    faces.append([idx[0], idx[k], idx[k + 1]])
            elif key in ("g", "o"):
                current = " ".join(parts[1:]) or "default"
    v = np.asarray(verts, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(v)):
        raise ParseError("non-finite vertex coordinates", path)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3) if faces else None
    return ShapeFile("obj", v, f, groups)


def read_xyz(path) -> ShapeFile:
    pts = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.replace(",", " ").split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise ParseError("expected 3 coordinates", path, lineno)
            try:
                pts.append([float(t) for t in parts[:3]])
            except ValueError:
                raise ParseError(f"bad coordinates {line.strip()!r}", path, lineno) from None
    v = np.asarray(pts, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(v)):
        raise ParseError("non-finite coordinates", path)
    return ShapeFile("xyz", v)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError("missing 'ply' magic", path, 1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("unterminated header", path, lineno)
        parts = raw.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", path, lineno)
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown property type {parts[1]!r}", path, lineno)
                elements[-1]["props"].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", path)
    return fmt, elements, lineno


def read_ply(path) -> ShapeFile:
    with open(path, "rb") as fh:
        fmt, elements, lineno = _parse_ply_header(fh, path)
        body = fh.read()
    verts = None
    faces = []
    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                while pos < len(lines) and not lines[pos].strip():
                    pos += 1
                if pos >= len(lines):
                    raise ParseError(f"truncated {el['name']} data", path, lineno + pos + 1)
                try:
                    rows.append([float(t) for t in lines[pos].split()])
                except ValueError:
                    raise ParseError("bad number", path, lineno + pos + 1) from None
                pos += 1
            if el["name"] == "vertex":
                names = [p[0] for p in el["props"]]
                try:
                    cols = [names.index(a) for a in "xyz"]
                except ValueError:
                    raise ParseError("vertex element lacks x/y/z", path) from None
                verts = np.array([[r[c] for c in cols] for r in rows], dtype=float).reshape(-1, 3)
            elif el["name"] == "face":
                for k, r in enumerate(rows):
                    n = int(r[0])
                    idx = [int(t) for t in r[1 : 1 + n]]
                    faces.append((idx, lineno + pos - len(rows) + k + 1))
    else:
        off = 0
        for el in elements:
            if all(p[1] != "list" for p in el["props"]):
                dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in el["props"]])
                size = dt.itemsize * el["count"]
                if off + size > len(body):
                    raise ParseError(f"truncated binary {el['name']} data", path)
                arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=off)
                off += size
                if el["name"] == "vertex":
                    try:
                        verts = np.stack([arr[a].astype(float) for a in "xyz"], axis=1)
                    except (ValueError, KeyError):
                        raise ParseError("vertex element lacks x/y/z", path) from None
            else:
                for _ in range(el["count"]):
                    rec_idx = None
                    for p in el["props"]:
                        if p[1] == "list":
                            ct = np.dtype("<" + _PLY_TYPES[p[2]])
                            it = np.dtype("<" + _PLY_TYPES[p[3]])
                            if off + ct.itemsize > len(body):
                                raise ParseError(f"truncated binary {el['name']} data", path)
                            n = int(np.frombuffer(body, ct, 1, off)[0])
                            off += ct.itemsize
                            if off + n * it.itemsize > len(body):
                                raise ParseError(f"truncated binary {el['name']} data", path)
                            vals = np.frombuffer(body, it, n, off).astype(np.int64).tolist()
                            off += n * it.itemsize
                            if p[0] in ("vertex_indices", "vertex_index"):
                                rec_idx = vals
                        else:
                            off += np.dtype(_PLY_TYPES[p[1]]).itemsize
                    if el["name"] == "face" and rec_idx is not None:
                        faces.append((rec_idx, None))
    if verts is None:
        raise ParseError("no vertex element", path)
    if not np.all(np.isfinite(verts)):
        raise ParseError("non-finite vertex coordinates", path)
    tris = []
    for idx, ln in faces:
        if len(idx) < 3 or min(idx) < 0 or max(idx) >= len(verts):
            raise ParseError(f"bad face {idx}", path, ln)
        for k in range(1, len(idx) - 1):
            tris.append([idx[0], idx[k], idx[k + 1]])
    f = np.asarray(tris, dtype=np.int64).reshape(-1, 3) if tris else None
    return ShapeFile("ply", verts, f)


def read_shape(path) -> ShapeFile:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        shape = read_obj(path)
    elif ext == ".ply":
        shape = read_ply(path)
    elif ext in (".xyz", ".txt", ".pts"):
        shape = read_xyz(path)
    else:
        raise ParseError(f"unrecognized shape extension {ext!r}", path)
    if len(shape.vertices) == 0:
        raise EmptyShape(f"{path}: no vertices")
    return shape


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def triangle_areas(vertices, faces) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(vertices, faces, n: int, seed: int = 0, return_faces: bool = False):
    """Uniform area-weighted samples on a triangle mesh."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    areas = triangle_areas(vertices, faces)
    total = areas.sum()
    if total <= 0:
        raise EmptyShape("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    fid = rng.choice(len(faces), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (vertices[faces[fid, k]] for k in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return (pts, fid) if return_faces else pts


def load_target(path, samples: int = 2000, seed: int = 0) -> TargetCloud:
    """Target cloud from a shape file.

    Meshes are sampled uniformly by area; point files are used as-is, or
    subsampled without replacement when they hold more than ``samples``
    points.
    """
    shape = read_shape(path)
    if shape.has_faces:
        pts = sample_surface(shape.vertices, shape.faces, samples, seed)
    else:
        pts = shape.vertices
        if len(pts) > samples:
            rng = np.random.default_rng(seed)
            pts = pts[np.sort(rng.choice(len(pts), samples, replace=False))]
    return TargetCloud(pts)


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def write_obj(path, vertices, faces, groups=None) -> None:
    """Write a triangle mesh; ``groups`` is a list of ``(name, face_slice)``."""
    lines = [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in np.asarray(vertices)]
    faces = np.asarray(faces, dtype=np.int64)
    if groups is None:
        groups = [(None, slice(0, len(faces)))]
    for name, sl in groups:
        if name is not None:
            lines.append(f"g {name}")
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces[sl])
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_xyz(path, points) -> None:
    atomic_write_text(path, "".join(f"{_fmt(a)} {_fmt(b)} {_fmt(c)}\n" for a, b, c in np.asarray(points)))


def sphere_topology(nu: int, nv: int):
    """Latitude rings and pole fans of a closed (u, v) mesh.

    Returns the angle array for ``(nu - 1) * nv`` ring vertices plus two
    poles (south first, north last), and the triangle list.
    """
    if nu < 2 or nv < 3:
        raise ValueError("mesh grid needs nu >= 2 and nv >= 3")
    u = -np.pi / 2 + np.arange(1, nu) * np.pi / nu
    v = -np.pi + np.arange(nv) * 2 * np.pi / nv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    uv = np.concatenate([[[-np.pi / 2, 0.0]], ring, [[np.pi / 2, 0.0]]])
    south, north = 0, len(uv) - 1

    def vid(i, j):
        return 1 + i * nv + (j % nv)

    tris = []
    for j in range(nv):
        tris.append([south, vid(0, j + 1), vid(0, j)])
    for i in range(nu - 2):
        for j in range(nv):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j + 1), vid(i + 1, j)
            tris.append([a, b, c])
            tris.append([a, c, d])
    for j in range(nv):
        tris.append([north, vid(nu - 2, j), vid(nu - 2, j + 1)])
    return uv, np.asarray(tris, dtype=np.int64)


def primitive_mesh(prim: Primitive, nu: int = 32, nv: int = 32):
    """Closed triangle mesh of a primitive's world-space surface."""
    uv, tris = sphere_topology(nu, nv)
    verts = prim.world_points(uv)
    return verts, tris


def export_mesh(prims, path, grid=(32, 32)) -> None:
    """Write all primitives to one OBJ, one ``g`` group per primitive."""
    nu, nv = grid
    all_v, all_f, groups = [], [], []
    offset = 0
    for k, prim in enumerate(prims):
        v, f = primitive_mesh(prim, nu, nv)
        groups.append((f"primitive_{k}", slice(sum(len(x) for x in all_f), sum(len(x) for x in all_f) + len(f))))
        all_v.append(v)
        all_f.append(f + offset)
        offset += len(v)
    try:
        write_obj(path, np.concatenate(all_v), np.concatenate(all_f), groups)
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# parameter documents
# ---------------------------------------------------------------------------

def primitive_to_dict(prim: Primitive) -> dict:
    v = prim.velocity
    return {
        "q_c": prim.pose.c.tolist(),
        "q_theta": prim.pose.theta.tolist(),
        "q_s": prim.globals.to_dict(),
        "svf": {
            "res": v.res,
            "half": v.half,
            "sigma": v.sigma,
            "steps": prim.steps,
            "grid": v.grid.tolist(),
        },
        "uv": prim.uv.tolist(),
    }


def _require(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ParseError(f"missing field {where}.{key}" if where else f"missing field {key}")
    return d[key]


def primitive_from_dict(d: dict, where: str = "primitive") -> Primitive:
    c = _require(d, "q_c", where)
    theta = _require(d, "q_theta", where)
    qs = _require(d, "q_s", where)
    svf = _require(d, "svf", where)
    for name in PARAM_NAMES:
        _require(qs, name, f"{where}.q_s")
    for key in ("half", "sigma", "grid"):
        _require(svf, key, f"{where}.svf")
    try:
        g = GlobalParams(**{name: qs[name] for name in PARAM_NAMES})
        grid = np.asarray(svf["grid"], dtype=float)
        vel = ld.VelocityField(grid, svf["half"], svf["sigma"])
        uv = np.asarray(_require(d, "uv", where), dtype=float).reshape(-1, 2)
        pose = Pose(np.asarray(c, dtype=float), np.asarray(theta, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid value in {where}: {exc}") from None
    return Primitive(pose, g, vel, uv, int(svf.get("steps", ld.DEFAULT_STEPS)))


def params_document(prims, config: dict | None = None, loss_summary: dict | None = None) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "block_order": ["q_c", "q_theta", "q_s", "q_d"],
        "primitives": [primitive_to_dict(p) for p in prims],
        "config": config or {},
        "loss_summary": loss_summary or {},
    }


def save_params(prims, path, config: dict | None = None, loss_summary: dict | None = None) -> None:
    doc = params_document(prims, config, loss_summary)
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def params_from_document(doc: dict):
    """Primitives, config and loss summary from a parsed parameter document."""
    if not isinstance(doc, dict):
        raise ParseError("parameter document must be a JSON object")
    version = _require(doc, "version", "")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"parameter schema version {version!r}, expected {SCHEMA_VERSION}")
    entries = _require(doc, "primitives", "")
    if not isinstance(entries, list):
        raise ParseError("field primitives must be a list")
    prims = [primitive_from_dict(e, f"primitives[{k}]") for k, e in enumerate(entries)]
    return prims, doc.get("config", {}), doc.get("loss_summary", {})


def load_params(path):
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    return params_from_document(doc)


def write_loss_csv(path, history) -> None:
    """One row per iteration with the external loss, the four generalized blocks and Chamfer-L1."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_CSV_FIELDS)
    for rec in history:
        w.writerow([rec.iter] + [repr(float(getattr(rec, k))) for k in LOSS_CSV_FIELDS[1:]])
    atomic_write_text(path, buf.getvalue())
