"""Point-cloud and mesh file formats, mesh sampling, and run configuration."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriangleMesh, fps
from .loss import LossWeights, SelfProjectionConfig, UniformConfig
from .network import NetworkConfig
from .training import TrainConfig, atomic_write_bytes

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class FormatError(ValueError):
    """Malformed input file; the message carries the file and line."""


class UnsupportedFeatureError(FormatError):
    pass


class ConfigError(ValueError):
    pass


# --- XYZ -------------------------------------------------------------------

def read_xyz(path):
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tok = body.replace(",", " ").split()
            if len(tok) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(tok)}")
            try:
                pts.append([float(t) for t in tok])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {body!r}") from None
    if not pts:
        raise FormatError(f"{path}: no points")
    arr = np.array(pts, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite coordinate")
    return arr


def format_xyz(points):
    # repr gives the shortest string that round-trips exactly
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(points, dtype=np.float64).tolist())


def write_xyz(path, points):
    atomic_write_bytes(path, format_xyz(points).encode())


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise FormatError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError(f"{path}: header not terminated by end_header")
        tok = raw.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before any element")
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _ply_type(tok[2], path), _ply_type(tok[3], path)))
            else:
                elements[-1]["props"].append((tok[2], "scalar", _ply_type(tok[1], path), None))
        else:
            raise FormatError(f"{path}: unexpected header line {raw!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFeatureError(f"{path}: PLY format {fmt!r} is not supported")
    return fmt, elements


def _ply_type(name, path):
    try:
        return _PLY_TYPES[name]
    except KeyError:
        raise UnsupportedFeatureError(f"{path}: unknown PLY property type {name!r}") from None


def _check_elements(elements, path):
    names = [e["name"] for e in elements]
    if "vertex" not in names:
        raise FormatError(f"{path}: no vertex element")
    for e in elements:
        props = {p[0]: p for p in e["props"]}
        if e["name"] == "vertex":
            if not {"x", "y", "z"} <= props.keys():
                raise FormatError(f"{path}: vertex element lacks x/y/z")
            if any(p[1] == "list" for p in e["props"]):
                raise UnsupportedFeatureError(f"{path}: list properties on vertices are not supported")
        elif e["name"] == "face":
            lists = [p for p in e["props"] if p[1] == "list"]
            if len(lists) != 1 or lists[0][0] not in ("vertex_indices", "vertex_index"):
                raise UnsupportedFeatureError(f"{path}: face element must carry one vertex_indices list")
        elif any(p[1] == "list" for p in e["props"]) and e["count"]:
            raise UnsupportedFeatureError(f"{path}: list properties on element {e['name']!r} are not supported")


def read_ply(path):
    """ASCII or binary little-endian PLY to a TriangleMesh (faces may be empty)."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        _check_elements(elements, path)
        body = fh.read()
    vertices, faces = None, []
    if fmt == "ascii":
        lines = iter(body.decode("ascii").split("\n"))
        for e in elements:
            rows = []
            for _ in range(e["count"]):
                line = next(lines, None)
                while line is not None and not line.strip():
                    line = next(lines, None)
                if line is None:
                    raise FormatError(f"{path}: truncated {e['name']} data")
                rows.append(line.split())
            vertices, faces = _ply_ascii_element(e, rows, vertices, faces, path)
    else:
        offset = 0
        for e in elements:
            vertices, faces, offset = _ply_binary_element(e, body, offset, vertices, faces, path)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, faces)


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _ply_ascii_element(e, rows, vertices, faces, path):
    if e["name"] == "vertex":
        names = [p[0] for p in e["props"]]
        cols = [names.index(c) for c in "xyz"]
        try:
            vertices = np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64)
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed vertex row") from None
    elif e["name"] == "face":
        for r in rows:
            cnt = int(r[0])
            faces.extend(_fan([int(v) for v in r[1:1 + cnt]]))
    return vertices, faces


def _ply_binary_element(e, body, offset, vertices, faces, path):
    if all(p[1] == "scalar" for p in e["props"]):
        dt = np.dtype([(p[0], "<" + p[2]) for p in e["props"]])
        end = offset + dt.itemsize * e["count"]
        if end > len(body):
            raise FormatError(f"{path}: truncated {e['name']} data")
        arr = np.frombuffer(body[offset:end], dtype=dt)
        if e["name"] == "vertex":
            vertices = np.stack([arr[c].astype(np.float64) for c in "xyz"], axis=1)
        return vertices, faces, end
    # face element: scalars then the index list, read row by row
    for _ in range(e["count"]):
        for name, kind, t, item in e["props"]:
            if kind == "scalar":
                offset += np.dtype(t).itemsize
                continue
            cnt = int(np.frombuffer(body, dtype="<" + t, count=1, offset=offset)[0])
            offset += np.dtype(t).itemsize
            idx = np.frombuffer(body, dtype="<" + item, count=cnt, offset=offset)
            offset += np.dtype(item).itemsize * cnt
            faces.extend(_fan(idx.astype(np.int64).tolist()))
    return vertices, faces, offset


def write_ply(path, vertices, faces=None, binary=False):
    v = np.asarray(vertices, dtype=np.float64)
    f = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64)
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0", f"element vertex {len(v)}",
            "property double x", "property double y", "property double z"]
    if len(f):
        head += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode()
    if binary:
        out += v.astype("<f8").tobytes()
        for tri in f:
            out += np.uint8(3).tobytes() + tri.astype("<i4").tobytes()
    else:
        out += format_xyz(v).encode()
        out += "".join(f"3 {a} {b} {c}\n" for a, b, c in f.tolist()).encode()
    atomic_write_bytes(path, out)


# --- OBJ -------------------------------------------------------------------

def read_obj(path):
    """Vertices and fan-triangulated faces of a Wavefront OBJ (0-indexed)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split("#", 1)[0].split()
            if not tok:
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                poly = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    poly.append(i - 1 if i > 0 else len(verts) + i)
                if len(poly) < 3:
                    raise FormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
                faces.extend(_fan(poly))
    if not verts:
        raise FormatError(f"{path}: no vertices")
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh):
    lines = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()]
    atomic_write_bytes(path, "".join(lines).encode())


def read_mesh(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise UnsupportedFeatureError(f"{path}: unknown mesh extension {ext!r}")


def read_points(path):
    ext = os.path.splitext(path)[1].lower()
    if ext in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    return read_mesh(path).vertices


# --- mesh sampling ---------------------------------------------------------

def sample_area_weighted(mesh, n, rng):
    tris = mesh.triangles
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero surface area")
    face = rng.choice(len(tris), size=n, p=areas / total)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    t = tris[face]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def dart_throw(candidates, radius):
    """Greedy Poisson-disk acceptance over candidates taken in order."""
    pairs = cKDTree(candidates).query_pairs(radius, output_type="ndarray")
    n = len(candidates)
    nbrs = [[] for _ in range(n)]
    for a, b in pairs.tolist():
        nbrs[a].append(b)
        nbrs[b].append(a)
    blocked = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if blocked[i]:
            continue
        keep.append(i)
        blocked[nbrs[i]] = True
    return np.array(keep, dtype=np.int64)


def sample_poisson_disk(mesh, n, rng, oversample=8, tol=0.02, max_iter=30):
    """Dart throwing with a bisected rejection radius, then exact-``n`` repair.

    The radius is tuned until the accepted count lands within ``tol`` of
    ``n``. Surplus points are trimmed by FPS; a shortfall is topped up with
    the candidates farthest from the accepted set.
    """
    cand = sample_area_weighted(mesh, max(oversample * n, 64), rng)
    area = mesh.areas().sum()
    lo, hi = 0.0, 2.0 * np.sqrt(area / n)
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        keep = dart_throw(cand, mid)
        if best is None or abs(len(keep) - n) < abs(len(best) - n):
            best = keep
        if abs(len(keep) - n) <= tol * n:
            break
        if len(keep) > n:
            lo = mid
        else:
            hi = mid
    pts = cand[best]
    if len(pts) > n:
        return pts[fps(pts, n, 0)]
    if len(pts) < n:
        order = fps(np.concatenate([pts, cand]), len(pts) + n - len(pts), 0)
        # FPS seeded from the accepted set: keep those, then take new picks
        chosen = np.concatenate([np.arange(len(pts)), order[order >= len(pts)]])[:n]
        merged = np.concatenate([pts, cand])
        return merged[chosen]
    return pts


def sample_mesh(mesh, n, mode="poisson-disk", seed=0):
    if n < 1:
        raise ValueError("n must be >= 1")
    mesh = mesh.drop_degenerate()
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces with positive area")
    rng = np.random.default_rng(seed)
    if mode == "area-weighted":
        return sample_area_weighted(mesh, n, rng)
    if mode == "poisson-disk":
        return sample_poisson_disk(mesh, n, rng)
    raise ValueError(f"unknown sampling mode {mode!r}")


# --- run configuration -----------------------------------------------------

_SECTIONS = {
    "weights": (LossWeights, {"alpha", "beta", "gamma"}),
    "net": (NetworkConfig, {f.name for f in fields(NetworkConfig)}),
    "uniform": (UniformConfig, {"M_seeds", "p_values"}),
    "sp": (SelfProjectionConfig, {"k_sp"}),
}
_TOP = {f.name for f in fields(TrainConfig)} - set(_SECTIONS) - {"r"}
PATH_KEYS = {"dataset_dir", "output_dir", "checkpoint_path", "log_path"}


def _typed(key, value, expected):
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _field_types(cls):
    hints = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}
    return {f.name: hints.get(f.type if isinstance(f.type, str) else f.type.__name__, None) for f in fields(cls)}


def build_config(flat):
    """Validate a flat key-value mapping into ``(TrainConfig, paths)``.

    Keys are the TrainConfig scalars, the network / loss fields (``K``,
    ``alpha``, ``M_seeds``, ``k_sp`` ...), ``preset`` (``desk`` or ``paper``)
    and the path keys. Unknown keys raise ConfigError.
    """
    flat = dict(flat)
    preset = flat.pop("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"preset must be 'desk' or 'paper', got {preset!r}")
    paths = {k: flat.pop(k) for k in list(flat) if k in PATH_KEYS}
    base = TrainConfig.desk() if preset == "desk" else TrainConfig.paper()
    d = base.to_dict()
    top_types = _field_types(TrainConfig)
    for key, value in flat.items():
        if key == "r":
            d["r"] = d["net"]["r"] = _typed(key, value, int)
            continue
        if key in _TOP:
            d[key] = _typed(key, value, top_types[key])
            continue
        for section, (cls, names) in _SECTIONS.items():
            if key in names:
                if key == "p_values":
                    if not isinstance(value, list):
                        raise ConfigError("p_values: expected a list of numbers")
                    value = [_typed(key, v, float) for v in value]
                else:
                    value = _typed(key, value, _field_types(cls)[key])
                d[section][key] = value
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg = TrainConfig.from_dict(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, {k: _typed(k, v, str) for k, v in paths.items()}


def load_config(path):
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: tables are not allowed (flat keys only): {nested}")
    return build_config(raw)


def config_to_toml(cfg, paths=None):
    """Flat TOML text for a TrainConfig (inverse of load_config)."""
    d = cfg.to_dict()
    lines = []
    for key in sorted(_TOP | {"r"}):
        lines.append(f"{key} = {_toml_value(d[key])}")
    for section in _SECTIONS:
        for key, value in d[section].items():
            if key == "r":
                continue
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in sorted((paths or {}).items()):
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)
