"""Point-cloud ingestion, synthetic shapes and normalization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyCloudError, ParseError

SHAPES = ("sphere", "cube", "cylinder", "torus")
FORMATS = ("off", "ply_ascii", "xyz")

CYLINDER_RADIUS = 0.5
CYLINDER_HALF_HEIGHT = 1.0
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3-D points with optional class and part labels."""

    points: np.ndarray
    label: Optional[int] = None
    part_labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyCloudError("point cloud has zero points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.part_labels is not None:
            parts = np.asarray(self.part_labels, dtype=np.int64)
            if parts.shape != (pts.shape[0],):
                raise ValueError(
                    f"part_labels has {parts.shape} entries, expected ({pts.shape[0]},)"
                )
            object.__setattr__(self, "part_labels", parts)

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points):
        return replace(self, points=points)


def _infer_format(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return "off"
    if suffix == ".ply":
        return "ply_ascii"
    if suffix in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise ParseError(f"cannot infer format from extension {suffix!r}")


def _parse_xyz_line(tokens, lineno):
    if len(tokens) < 3:
        raise ParseError(f"expected 3 coordinates, got {len(tokens)}", lineno)
    try:
        return [float(t) for t in tokens[:3]]
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {' '.join(tokens)!r}", lineno) from None


def _content_lines(text):
    # (lineno, tokens) for non-blank, non-comment lines
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _read_off(text):
    lines = _content_lines(text)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    if tokens[0] != "OFF":
        # some writers glue the counts onto the header: "OFF3 0 0"
        if tokens[0].startswith("OFF") and tokens[0][3:].isdigit():
            tokens = [tokens[0][3:]] + tokens[1:]
        else:
            raise ParseError(f"expected 'OFF' header, got {tokens[0]!r}", lineno)
    else:
        tokens = tokens[1:]
    if not tokens:
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise ParseError("missing 'V F E' counts line", lineno + 1) from None
    try:
        n_vertices = int(tokens[0])
    except (ValueError, IndexError):
        raise ParseError(f"bad counts line {' '.join(tokens)!r}", lineno) from None
    points = []
    for _ in range(n_vertices):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise ParseError(
                f"expected {n_vertices} vertices, file ended after {len(points)}", lineno + 1
            ) from None
        points.append(_parse_xyz_line(tokens, lineno))
    return points


def _read_ply(text):
    lines = list(_ply_lines(text))
    if not lines or lines[0][1] != ["ply"]:
        raise ParseError("missing 'ply' magic", lines[0][0] if lines else 1)
    n_vertices = None
    vertex_props = []
    elements = []  # (name, count, [props])
    i = 1
    while i < len(lines):
        lineno, tokens = lines[i]
        i += 1
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got {' '.join(tokens[1:])!r}", lineno)
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"malformed element line {' '.join(tokens)!r}", lineno)
            try:
                elements.append((tokens[1], int(tokens[2]), []))
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", lineno) from None
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            elements[-1][2].append(tokens[-1] if tokens[1] != "list" else ("list", tokens[-1]))
        elif key == "end_header":
            break
        elif key in ("comment", "obj_info"):
            continue
        else:
            raise ParseError(f"unexpected header keyword {key!r}", lineno)
    else:
        raise ParseError("missing end_header", lines[-1][0] if lines else 1)

    body = lines[i:]
    cursor = 0
    points = []
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        n_vertices = count
        vertex_props = props
        try:
            cols = [vertex_props.index(axis) for axis in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x/y/z properties", lines[0][0]) from None
        for k in range(count):
            if cursor >= len(body):
                last = body[-1][0] if body else lines[i - 1][0]
                raise ParseError(
                    f"expected {count} vertex lines, file ended after {k}", last + 1
                )
            lineno, tokens = body[cursor]
            cursor += 1
            if len(tokens) < len(vertex_props):
                raise ParseError(
                    f"vertex line has {len(tokens)} values, expected {len(vertex_props)}", lineno
                )
            try:
                points.append([float(tokens[c]) for c in cols])
            except ValueError:
                raise ParseError(f"non-numeric vertex value in {' '.join(tokens)!r}", lineno) from None
        break
    if n_vertices is None:
        raise ParseError("no vertex element in header", lines[0][0])
    return points


def _ply_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            yield lineno, line.split()


def _read_xyz(text):
    return [_parse_xyz_line(tokens, lineno) for lineno, tokens in _content_lines(text)]


_READERS = {"off": _read_off, "ply_ascii": _read_ply, "xyz": _read_xyz}


def load_point_cloud(path, format=None, label=None):
    """Read vertices from an OFF, ASCII PLY or XYZ file, in file order.

    Faces and any non-coordinate vertex properties are ignored.
    """
    fmt = format or _infer_format(path)
    if fmt not in _READERS:
        raise ParseError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    text = Path(path).read_text()
    points = _READERS[fmt](text)
    if not points:
        raise EmptyCloudError(f"{path}: zero vertices")
    return PointCloud(np.array(points, dtype=np.float64), label=label)


def save_point_cloud(path, cloud, format=None):
    fmt = format or _infer_format(path)
    rows = "\n".join(f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist())
    n = len(cloud)
    if fmt == "xyz":
        text = rows + "\n"
    elif fmt == "off":
        text = f"OFF\n{n} 0 0\n{rows}\n"
    elif fmt == "ply_ascii":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {n}\n"
            "property double x\nproperty double y\nproperty double z\n"
            "end_header\n"
        )
        text = header + rows + "\n"
    else:
        raise ParseError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    Path(path).write_text(text)


def _sample_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True), None


def _sample_cube(rng, n):
    # surface of [-1, 1]^3, six faces of equal area
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts, None


def _sample_cylinder(rng, n):
    r, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
    cap_area = np.pi * r * r
    side_area = 2.0 * np.pi * r * (2.0 * h)
    probs = np.array([cap_area, side_area, cap_area]) / (2 * cap_area + side_area)
    part = rng.choice(3, size=n, p=probs)  # 0 bottom cap, 1 side, 2 top cap
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rad = np.where(part == 1, r, r * np.sqrt(rng.uniform(0.0, 1.0, size=n)))
    z_side = rng.uniform(-h, h, size=n)
    z = np.select([part == 0, part == 2], [-h, h], default=z_side)
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    return pts, part


def _sample_torus(rng, n):
    big, small = TORUS_MAJOR, TORUS_MINOR
    u_all, v_all = [], []
    have = 0
    # rejection sampling against the area element (big + small cos v)
    while have < n:
        m = 2 * (n - have) + 16
        u = rng.uniform(0.0, 2.0 * np.pi, size=m)
        v = rng.uniform(0.0, 2.0 * np.pi, size=m)
        w = rng.uniform(0.0, big + small, size=m)
        keep = w < big + small * np.cos(v)
        u_all.append(u[keep])
        v_all.append(v[keep])
        have += int(keep.sum())
    u = np.concatenate(u_all)[:n]
    v = np.concatenate(v_all)[:n]
    ring = big + small * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
    part = (u >= np.pi).astype(np.int64)
    return pts, part


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
}


def generate_synthetic(shape, n_points, seed):
    """Sample ``n_points`` uniformly on the surface of a canonical shape.

    The class label is the shape's index in ``SHAPES``. Cylinders carry part
    labels (0 bottom cap, 1 side, 2 top cap); tori are split into two halves
    by azimuth.
    """
    if shape not in _SAMPLERS:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if n_points < 8:
        raise ValueError(f"n_points must be >= 8, got {n_points}")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    pts, parts = _SAMPLERS[shape](rng, int(n_points))
    return PointCloud(pts, label=SHAPES.index(shape), part_labels=parts)


def normalize_unit_sphere(cloud):
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    scale = np.sqrt((pts * pts).sum(axis=1).max())
    if scale < 1e-12:
        return cloud.with_points(np.zeros_like(pts))
    return cloud.with_points(pts / scale)
