"""Synthetic shape dataset, XYZ/OFF/PLY readers and writers, dataset bundles."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from pcsaliency.errors import FormatError, ParseError, StructuralError
from pcsaliency.model import atomic_write

CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "cross_planes", "helix")


@dataclass
class LabeledCloud:
    points: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise StructuralError(f"cloud must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise StructuralError(f"non-finite coordinates in {self.source_id or 'cloud'}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ShapeSpec:
    classes: tuple[str, ...] = CLASSES
    points: int = 256
    train_per_class: int = 200
    test_per_class: int = 50
    sigma: float = 0.01
    seed: int = 0
    vary: bool = field(default=True)

    def __post_init__(self):
        if self.points < 32:
            raise StructuralError("points per cloud must be >= 32")
        if self.sigma < 0:
            raise StructuralError("jitter sigma must be >= 0")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise StructuralError(f"unknown shape classes {sorted(unknown)}")


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Center on the mean and scale so the farthest point sits at radius 1."""
    x = np.asarray(points, dtype=np.float64)
    scale = np.abs(x).max(initial=0.0)
    x = x - x.mean(axis=0)
    radius = np.sqrt((x * x).sum(axis=1)).max()
    # coincident points leave only centering round-off; treat as a single point
    if radius <= 1e-12 * max(scale, 1.0):
        return np.zeros_like(x)
    return x / radius


# -- surface samplers -----------------------------------------------------------
# each takes (rng, n, params) and returns n points uniformly distributed by area


def sample_triangles(vertices: np.ndarray, faces: np.ndarray, n: int, rng) -> np.ndarray:
    """Area-weighted uniform sampling on a triangle mesh."""
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if not total > 0:
        raise StructuralError("mesh has zero surface area")
    tri = rng.choice(len(faces), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)[:, None]
    return (1 - su) * a[tri] + su * (1 - v[:, None]) * b[tri] + su * v[:, None] * c[tri]


def _sphere(rng, n, p):
    # antipodal pairs keep the sample mean exactly at the center
    half = rng.normal(size=((n + 1) // 2, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    return np.concatenate([half, -half])[:n]


_BOX_V = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
_BOX_F = np.array(
    [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
     [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
)


def _cube(rng, n, p):
    return sample_triangles(_BOX_V * p["dims"], _BOX_F, n, rng)


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    return r * np.cos(t), r * np.sin(t)


def _cylinder(rng, n, p):
    r, h = p["radius"], p["height"]
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    out = np.empty((n, 3))
    m = part == 0
    t = rng.uniform(0, 2 * np.pi, m.sum())
    out[m] = np.column_stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h / 2, h / 2, m.sum())])
    for k, z in ((1, -h / 2), (2, h / 2)):
        m = part == k
        dx, dy = _disk(rng, m.sum(), r)
        out[m] = np.column_stack([dx, dy, np.full(m.sum(), z)])
    return out


def _cone(rng, n, p):
    r, h = p["radius"], p["height"]
    side, base = np.pi * r * np.hypot(r, h), np.pi * r * r
    lateral = rng.random(n) < side / (side + base)
    out = np.empty((n, 3))
    m = lateral.sum()
    # radius from the apex grows linearly, so distance-from-apex ~ sqrt(u)
    s = np.sqrt(rng.random(m))
    t = rng.uniform(0, 2 * np.pi, m)
    out[lateral] = np.column_stack([s * r * np.cos(t), s * r * np.sin(t), h / 2 - s * h])
    dx, dy = _disk(rng, n - m, r)
    out[~lateral] = np.column_stack([dx, dy, np.full(n - m, -h / 2)])
    return out


def _torus(rng, n, p):
    big, small = p["major"], p["minor"]
    u = np.empty(0)
    v = np.empty(0)
    while len(u) < n:
        cu = rng.uniform(0, 2 * np.pi, 2 * n)
        cv = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) * (big + small) < big + small * np.cos(cv)
        u, v = np.concatenate([u, cu[keep]]), np.concatenate([v, cv[keep]])
    u, v = u[:n], v[:n]
    ring = big + small * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)])


def _pyramid(rng, n, p):
    w, h = p["base"] / 2, p["height"]
    verts = np.array([[-w, -w, -h / 2], [w, -w, -h / 2], [w, w, -h / 2], [-w, w, -h / 2], [0, 0, h / 2]])
    faces = np.array([[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return sample_triangles(verts, faces, n, rng)


def _cross_planes(rng, n, p):
    w, h = p["width"] / 2, p["height"] / 2
    a = rng.uniform(-w, w, n)
    z = rng.uniform(-h, h, n)
    first = rng.random(n) < 0.5
    zeros = np.zeros(n)
    return np.where(first[:, None], np.column_stack([a, zeros, z]), np.column_stack([zeros, a, z]))


def _helix(rng, n, p):
    radius, turns, height, tube = p["radius"], p["turns"], p["height"], p["tube"]
    # constant-speed curve: uniform parameter is uniform arc length
    t = rng.random(n)
    angle = 2 * np.pi * turns * t
    center = np.column_stack([radius * np.cos(angle), radius * np.sin(angle), height * (t - 0.5)])
    tangent = np.column_stack(
        [-radius * np.sin(angle) * 2 * np.pi * turns, radius * np.cos(angle) * 2 * np.pi * turns, np.full(n, height)]
    )
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.column_stack([np.cos(angle), np.sin(angle), np.zeros(n)])
    binormal = np.cross(tangent, normal)
    phi = rng.uniform(0, 2 * np.pi, n)
    return center + tube * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)


def _params(name: str, rng, vary: bool) -> dict:
    def u(lo, hi, mid):
        return rng.uniform(lo, hi) if vary else mid

    if name == "cube":
        return {"dims": np.array([u(0.7, 1.3, 1.0), u(0.7, 1.3, 1.0), u(0.7, 1.3, 1.0)])}
    if name == "cylinder":
        return {"radius": u(0.35, 0.55, 0.45), "height": u(1.2, 2.0, 1.6)}
    if name == "cone":
        return {"radius": u(0.5, 0.8, 0.65), "height": u(1.2, 1.8, 1.5)}
    if name == "torus":
        return {"major": u(0.8, 1.0, 0.9), "minor": u(0.2, 0.35, 0.28)}
    if name == "pyramid":
        return {"base": u(1.2, 1.8, 1.5), "height": u(1.0, 1.6, 1.3)}
    if name == "cross_planes":
        return {"width": u(1.2, 1.8, 1.5), "height": u(1.2, 1.8, 1.5)}
    if name == "helix":
        return {"radius": u(0.5, 0.7, 0.6), "turns": u(2.0, 3.0, 2.5), "height": u(1.5, 2.2, 1.8), "tube": 0.08}
    return {}


SAMPLERS: dict[str, Callable] = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "cross_planes": _cross_planes,
    "helix": _helix,
}


def _rotation(rng, max_angle: float) -> np.ndarray:
    ax, ay, az = rng.uniform(-max_angle, max_angle, 3)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_shape(name: str, n: int, rng, sigma: float = 0.0, vary: bool = True) -> np.ndarray:
    """One normalized cloud of primitive ``name``."""
    pts = SAMPLERS[name](rng, n, _params(name, rng, vary))
    if vary and name != "sphere":
        pts = pts @ _rotation(rng, np.pi / 12).T
    if sigma > 0:
        pts = pts + rng.normal(scale=sigma, size=pts.shape)
    return normalize_unit_sphere(pts)


def generate_shapes(spec: ShapeSpec | None = None) -> tuple[list[LabeledCloud], list[LabeledCloud]]:
    """Train and test splits; each split draws from its own child seed stream."""
    spec = spec or ShapeSpec()
    streams = np.random.SeedSequence(spec.seed).spawn(2)
    out = []
    for split, stream, per_class in (
        ("train", streams[0], spec.train_per_class),
        ("test", streams[1], spec.test_per_class),
    ):
        children = stream.spawn(len(spec.classes) * per_class)
        clouds = []
        for j, child in enumerate(children):
            label, i = j % len(spec.classes), j // len(spec.classes)
            name = spec.classes[label]
            pts = sample_shape(name, spec.points, np.random.default_rng(child), spec.sigma, spec.vary)
            clouds.append(LabeledCloud(pts, label, f"{split}/{name}_{i:04d}"))
        out.append(clouds)
    return out[0], out[1]


# -- file formats -----------------------------------------------------------------


def _fmt(v: float) -> str:
    # repr is the shortest string that round-trips to the same double
    return repr(float(v))


def _content_lines(path) -> list[tuple[int, str]]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append((lineno, line))
    return out


def _floats(path, lineno: int, fields: Sequence[str], what: str) -> list[float]:
    try:
        vals = [float(f) for f in fields]
    except ValueError:
        raise ParseError(path, lineno, f"malformed {what}: {' '.join(fields)!r}") from None
    if not all(np.isfinite(vals)):
        raise ParseError(path, lineno, f"non-finite {what}")
    return vals


def load_xyz(path, label: int = 0) -> LabeledCloud:
    """One point per line, three whitespace-separated numbers."""
    rows = []
    for lineno, line in _content_lines(path):
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(path, lineno, f"expected 3 coordinates, got {len(fields)}")
        rows.append(_floats(path, lineno, fields, "coordinate"))
    if not rows:
        raise ParseError(path, 1, "no points")
    return LabeledCloud(np.array(rows), label, str(path))


def write_xyz(points: np.ndarray, path) -> None:
    atomic_write(path, "".join(" ".join(_fmt(v) for v in p) + "\n" for p in points))


def parse_off(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices ``(V, 3)`` and triangulated faces ``(T, 3)`` of an OFF file."""
    lines = _content_lines(path)
    if not lines or not lines[0][1].startswith("OFF"):
        raise ParseError(path, lines[0][0] if lines else 1, "missing OFF header")
    rest = lines[0][1][3:].split()
    pos = 1
    if rest:
        counts_line, counts = lines[0][0], rest
    else:
        if len(lines) < 2:
            raise ParseError(path, lines[0][0] + 1, "missing vertex/face count line")
        counts_line, counts = lines[1]
        counts = counts.split()
        pos = 2
    try:
        n_vert, n_face = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError(path, counts_line, f"bad count header {' '.join(counts)!r}") from None
    if n_vert < 1 or n_face < 0:
        raise ParseError(path, counts_line, "vertex count must be >= 1")
    end_line = lines[-1][0] + 1
    verts = []
    for i in range(n_vert):
        if pos >= len(lines):
            raise ParseError(path, end_line, f"truncated: expected {n_vert} vertices, got {i}")
        lineno, line = lines[pos]
        fields = line.split()
        if len(fields) < 3:
            raise ParseError(path, lineno, "vertex needs 3 coordinates")
        verts.append(_floats(path, lineno, fields[:3], "vertex"))
        pos += 1
    tris = []
    for i in range(n_face):
        if pos >= len(lines):
            raise ParseError(path, end_line, f"truncated: expected {n_face} faces, got {i}")
        lineno, line = lines[pos]
        try:
            fields = [int(f) for f in line.split()]
        except ValueError:
            raise ParseError(path, lineno, f"malformed face {line!r}") from None
        if not fields or fields[0] < 3 or len(fields) < fields[0] + 1:
            raise ParseError(path, lineno, "face needs a count >= 3 followed by that many indices")
        idx = fields[1 : fields[0] + 1]
        if min(idx) < 0 or max(idx) >= n_vert:
            raise ParseError(path, lineno, "face index out of range")
        tris.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1))
        pos += 1
    return np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3)


def load_off(path, n_points: int | None = None, label: int = 0, seed: int = 0) -> LabeledCloud:
    """Vertices as-is, or ``n_points`` area-weighted surface samples when given."""
    verts, faces = parse_off(path)
    if n_points is None:
        return LabeledCloud(verts, label, str(path))
    if len(faces) == 0:
        raise ParseError(path, 1, "surface sampling needs at least one face")
    pts = sample_triangles(verts, faces, n_points, np.random.default_rng(seed))
    return LabeledCloud(pts, label, str(path))


def load_cloud(path, label: int = 0, n_points: int | None = 1024, seed: int = 0) -> LabeledCloud:
    """Dispatch on extension: ``.off`` is surface-sampled, anything else read as XYZ."""
    if str(path).lower().endswith(".off"):
        return load_off(path, n_points, label, seed)
    if str(path).lower().endswith(".ply"):
        return LabeledCloud(read_ply(path)[0], label, str(path))
    return load_xyz(path, label)


def rank_colors(scores: np.ndarray) -> np.ndarray:
    """Blue-to-red ramp over score rank; the top score is pure red.

    Tied scores share their average rank, so a constant map is uniformly
    the ramp midpoint.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 1:
        t = np.array([0.5])
    else:
        t = (rankdata(-scores, method="average") - 1) / (n - 1)
    red = np.rint(255 * (1 - t))
    blue = np.rint(255 * t)
    return np.column_stack([red, np.zeros(n), blue]).astype(np.uint8)


def write_ply_colored(points: np.ndarray, scores: np.ndarray, path) -> None:
    points = np.asarray(getattr(points, "points", points))
    scores = np.asarray(getattr(scores, "scores", scores))
    if len(scores) != len(points):
        raise StructuralError(f"{len(scores)} scores for {len(points)} points")
    colors = rank_colors(scores)
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"element vertex {len(points)}\n")
    for axis in "xyz":
        out.write(f"property double {axis}\n")
    for ch in ("red", "green", "blue"):
        out.write(f"property uchar {ch}\n")
    out.write("end_header\n")
    for p, c in zip(points, colors):
        out.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {c[0]} {c[1]} {c[2]}\n")
    atomic_write(path, out.getvalue())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates and RGB colors from an ASCII PLY written by :func:`write_ply_colored`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing ply magic")
    count = None
    props: list[str] = []
    body = None
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if fields[0] == "format" and fields[1:2] != ["ascii"]:
            raise ParseError(path, lineno, "only ASCII PLY is supported")
        if fields[:2] == ["element", "vertex"]:
            count = int(fields[2])
        elif fields[0] == "property":
            props.append(fields[-1])
        elif fields[0] == "end_header":
            body = lineno
            break
    if body is None or count is None:
        raise ParseError(path, len(lines), "incomplete PLY header")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise ParseError(path, body, "PLY lacks x/y/z properties") from None
    rgb = [props.index(c) for c in ("red", "green", "blue")] if "red" in props else None
    pts, colors = [], []
    for j in range(count):
        lineno = body + 1 + j
        if lineno > len(lines):
            raise ParseError(path, lineno, f"truncated: expected {count} vertices, got {j}")
        fields = lines[lineno - 1].split()
        if len(fields) != len(props):
            raise ParseError(path, lineno, f"expected {len(props)} values, got {len(fields)}")
        pts.append(_floats(path, lineno, [fields[c] for c in cols], "vertex"))
        if rgb:
            colors.append([int(fields[c]) for c in rgb])
    return np.array(pts), np.array(colors, dtype=np.uint8).reshape(-1, 3)


# -- dataset bundles: a directory of XYZ files plus labels.csv (filename,label) ------


def write_bundle(clouds: Iterable[LabeledCloud], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(["filename", "label"])
    for i, cloud in enumerate(clouds):
        name = f"cloud_{i:05d}.xyz"
        write_xyz(cloud.points, directory / name)
        writer.writerow([name, int(cloud.label)])
    atomic_write(directory / "labels.csv", rows.getvalue())


def read_bundle(directory, k: int | None = None) -> list[LabeledCloud]:
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.is_file():
        raise FormatError(f"{directory} has no labels.csv")
    clouds = []
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise ParseError(labels_path, 1, "header must be 'filename,label'")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ParseError(labels_path, lineno, "expected filename,label")
            try:
                label = int(row[1])
            except ValueError:
                raise ParseError(labels_path, lineno, f"bad label {row[1]!r}") from None
            if label < 0 or (k is not None and label >= k):
                raise FormatError(f"{labels_path}:{lineno}: label {label} outside [0, {k})")
            cloud = load_xyz(directory / row[0], label)
            cloud.source_id = row[0]
            clouds.append(cloud)
    if not clouds:
        raise FormatError(f"{labels_path} lists no clouds")
    return clouds
