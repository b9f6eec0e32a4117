"""Point-cloud data model, geometry file formats, sampling, and toy shapes.

Formats: OFF (including the ModelNet dialect that glues the counts onto
the "OFF" keyword line), ASCII PLY (vertices, optional faces; binary PLY
unsupported), and XYZ (one "x y z" per line). Writers print 17
significant digits so a write/read round trip is exact.

The procedural toy shapes are rotationally asymmetric on purpose - an
oblique cone, an uneven L prism, a tapered box, a flagged tetrahedron -
so every instance has a well-defined orientation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import quat
from .checkpoint import atomic_write_text
from .errors import (
    EmptyGeometryError,
    ParseError,
    TooManyRequestedError,
    ZeroAreaError,
)

DEGENERATE_FACE_AREA = 1e-14


@dataclass
class PointCloud:
    """Ordered 3D points, optionally with per-point frames and a label."""

    points: np.ndarray  # (N, 3)
    lrf_quats: np.ndarray | None = None  # (N, 4) frame encodings
    label: int | None = None
    orientation: np.ndarray | None = None  # ground-truth pose when known
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be (N>=1, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite coordinates")
        if self.lrf_quats is not None:
            self.lrf_quats = np.asarray(self.lrf_quats, dtype=np.float64)
            if self.lrf_quats.shape != (self.points.shape[0], 4):
                raise ValueError("lrf_quats must be (N, 4)")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int indices
    degenerate_faces_removed: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _drop_degenerate_faces(mesh: TriMesh) -> TriMesh:
    if not len(mesh.faces):
        return mesh
    keep = mesh.face_areas() > DEGENERATE_FACE_AREA
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        mesh.faces = mesh.faces[keep]
        mesh.degenerate_faces_removed = dropped
    return mesh


@dataclass
class Grouping:
    """Per-center K-nearest-neighbor membership."""

    centers: np.ndarray  # (P,) point indices
    patches: np.ndarray  # (P, K) point indices, nearest first


# ---------------------------------------------------------------------------
# parsing


def _tokens(path, keep_comments=False):
    """Yield (line_number, token_list) for non-empty, non-comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0] if not keep_comments else line
            parts = body.split()
            if parts:
                yield lineno, parts


def load_off(path) -> TriMesh:
    """Parse an OFF mesh; polygon faces are fan-triangulated."""
    rows = _tokens(path)
    try:
        lineno, parts = next(rows)
    except StopIteration:
        raise EmptyGeometryError(f"{path}: empty file") from None

    if parts[0] == "OFF":
        counts = parts[1:]
    elif parts[0].startswith("OFF"):
        # ModelNet dialect: "OFF492 518 0" with the counts glued on
        counts = [parts[0][3:], *parts[1:]]
    else:
        raise ParseError(path, lineno, f"expected OFF header, got {parts[0]!r}")
    if not counts:
        lineno, counts = next(rows, (lineno, None))
        if counts is None:
            raise ParseError(path, lineno, "missing vertex/face counts")
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError(path, lineno, f"bad count line {counts!r}") from None
    if n_vertices == 0:
        raise EmptyGeometryError(f"{path}: no vertices")

    vertices = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        lineno, parts = next(rows, (lineno, None))
        if parts is None:
            raise ParseError(path, lineno, f"expected {n_vertices} vertices, file ended at {i}")
        try:
            vertices[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except (ValueError, IndexError):
            raise ParseError(path, lineno, f"bad vertex line {parts!r}") from None

    faces: list[tuple[int, int, int]] = []
    for i in range(n_faces):
        lineno, parts = next(rows, (lineno, None))
        if parts is None:
            raise ParseError(path, lineno, f"expected {n_faces} faces, file ended at {i}")
        try:
            arity = int(parts[0])
            idx = [int(tok) for tok in parts[1 : 1 + arity]]
        except (ValueError, IndexError):
            raise ParseError(path, lineno, f"bad face line {parts!r}") from None
        if arity < 3 or len(idx) != arity:
            raise ParseError(path, lineno, f"face needs >= 3 indices, got {parts!r}")
        if min(idx) < 0 or max(idx) >= n_vertices:
            raise ParseError(path, lineno, f"face index out of range in {parts!r}")
        for j in range(1, arity - 1):  # fan triangulation
            faces.append((idx[0], idx[j], idx[j + 1]))

    return _drop_degenerate_faces(TriMesh(vertices=vertices, faces=np.array(faces, dtype=np.int64).reshape(-1, 3)))


def load_ply_ascii(path) -> TriMesh:
    """Parse an ASCII PLY: vertex x/y/z properties, optional face lists."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines or lines[0].split() != ["ply"]:
        raise ParseError(path, 1, "missing 'ply' magic")

    elements: list[tuple[str, int, list[str]]] = []  # (name, count, property names)
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise ParseError(path, lineno, f"unsupported format {parts[1]!r} (ascii only)")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(path, lineno, "property before any element")
            elements[-1][2].append(parts[-1])
        elif parts[0] == "end_header":
            header_end = lineno
            break
    if header_end is None:
        raise ParseError(path, len(lines), "missing end_header")

    body = [(ln, line.split()) for ln, line in enumerate(lines[header_end:], start=header_end + 1)
            if line.split()]
    cursor = 0
    vertices = None
    faces: list[tuple[int, int, int]] = []
    for name, count, props in elements:
        if name == "vertex":
            try:
                ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
            except ValueError:
                raise ParseError(path, header_end, "vertex element lacks x/y/z") from None
            vertices = np.empty((count, 3))
            for i in range(count):
                lineno, parts = body[cursor]
                cursor += 1
                try:
                    vertices[i] = [float(parts[ix]), float(parts[iy]), float(parts[iz])]
                except (ValueError, IndexError):
                    raise ParseError(path, lineno, f"bad vertex line {parts!r}") from None
        elif name == "face":
            for _ in range(count):
                lineno, parts = body[cursor]
                cursor += 1
                try:
                    arity = int(parts[0])
                    idx = [int(tok) for tok in parts[1 : 1 + arity]]
                except (ValueError, IndexError):
                    raise ParseError(path, lineno, f"bad face line {parts!r}") from None
                for j in range(1, arity - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
        else:
            cursor += count  # skip unknown elements
    if vertices is None or not len(vertices):
        raise EmptyGeometryError(f"{path}: no vertices")
    return _drop_degenerate_faces(
        TriMesh(vertices=vertices, faces=np.array(faces, dtype=np.int64).reshape(-1, 3))
    )


def load_xyz(path) -> PointCloud:
    """Parse an XYZ file: one 'x y z' triple per line."""
    points = []
    for lineno, parts in _tokens(path):
        try:
            points.append((float(parts[0]), float(parts[1]), float(parts[2])))
        except (ValueError, IndexError):
            raise ParseError(path, lineno, f"bad coordinate line {parts!r}") from None
    if not points:
        raise EmptyGeometryError(f"{path}: no points")
    return PointCloud(points=np.array(points))


def save_xyz(cloud: PointCloud | np.ndarray, path) -> None:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    lines = [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in points]
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_off(mesh: TriMesh, path) -> None:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_ply_ascii(mesh: TriMesh, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# sampling and grouping


def sample_surface(mesh: TriMesh, n: int, seed) -> PointCloud:
    """Area-uniform surface samples: faces by area, barycentric within."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = float(areas.sum())
    if not len(mesh.faces) or total <= 0.0:
        raise ZeroAreaError("mesh has no sampleable surface area")
    face_idx = rng.choice(len(mesh.faces), size=n, p=areas / total)
    u = np.sqrt(rng.random(n))
    v = rng.random(n)
    tri = mesh.vertices[mesh.faces[face_idx]]
    points = (1.0 - u)[:, None] * tri[:, 0] + (u * (1.0 - v))[:, None] * tri[:, 1] + (
        u * v
    )[:, None] * tri[:, 2]
    return PointCloud(points=points)


def farthest_point_sampling(
    cloud: PointCloud | np.ndarray, n: int, seed=0, start: int | None = None
) -> np.ndarray:
    """Greedy subset maximizing the minimum pairwise distance.

    The first index comes from the seeded generator unless ``start`` pins
    it (``start="centroid_far"`` selects the point farthest from the
    centroid, which makes the choice a function of geometry alone). Ties
    resolve to the lowest index.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    total = points.shape[0]
    if n > total:
        raise TooManyRequestedError(f"requested {n} of {total} points")
    if start == "centroid_far":
        first = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    elif start is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        first = int(rng.integers(total))
    else:
        first = int(start)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    dist = np.linalg.norm(points - points[first], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def group_knn(cloud: PointCloud | np.ndarray, centers: np.ndarray, k: int) -> Grouping:
    """Exact k nearest neighbors of each center (self included, ties by index)."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    if k > points.shape[0]:
        raise TooManyRequestedError(f"k={k} exceeds cloud size {points.shape[0]}")
    patches = np.empty((len(centers), k), dtype=np.int64)
    for row, c in enumerate(centers):
        d2 = np.sum((points - points[c]) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")  # stable sort = ties by index
        patches[row] = order[:k]
    return Grouping(centers=centers, patches=patches)


# ---------------------------------------------------------------------------
# procedural toy shapes

TOY_CLASSES = ("elongated_box", "l_shape", "cone", "tetra_flag")


def _prism_mesh(polygon: np.ndarray, height: float, fan_root: int) -> TriMesh:
    """Extrude a star-shaped polygon along z; caps fan out of `fan_root`."""
    m = len(polygon)
    bottom = np.column_stack([polygon, np.zeros(m)])
    top = np.column_stack([polygon, np.full(m, height)])
    vertices = np.vstack([bottom, top])
    faces = []
    for i in range(m):
        j = (i + 1) % m
        faces += [(i, j, m + j), (i, m + j, m + i)]
    for i in range(m):
        j = (i + 1) % m
        if i == fan_root or j == fan_root:
            continue
        faces.append((fan_root, j, i))
        faces.append((m + fan_root, m + i, m + j))
    return TriMesh(vertices=vertices, faces=np.array(faces))


def _toy_mesh(name: str) -> TriMesh:
    if name == "elongated_box":
        # tapered box: offset, shrunken top breaks every rotational symmetry
        bx, by = 0.5, 0.25
        tx, ty = 0.27, 0.13
        ox, oy, h = 0.2, 0.1, 1.5
        vertices = np.array(
            [
                [-bx, -by, 0], [bx, -by, 0], [bx, by, 0], [-bx, by, 0],
                [ox - tx, oy - ty, h], [ox + tx, oy - ty, h],
                [ox + tx, oy + ty, h], [ox - tx, oy + ty, h],
            ]
        )
        quads = [
            (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7),
            (3, 2, 1, 0), (4, 5, 6, 7),
        ]
        faces = []
        for a, b, c, d in quads:
            faces += [(a, b, c), (a, c, d)]
        return TriMesh(vertices=vertices, faces=np.array(faces))
    if name == "l_shape":
        polygon = np.array(
            [[0, 0], [1.2, 0], [1.2, 0.4], [0.35, 0.4], [0.35, 0.7], [0, 0.7]],
            dtype=np.float64,
        )
        polygon -= polygon.mean(axis=0)
        return _prism_mesh(polygon, height=0.3, fan_root=3)
    if name == "cone":
        # oblique elliptical cone: apex off-axis, base axes unequal
        segments = 16
        t = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
        base = np.column_stack([0.55 * np.cos(t), 0.3 * np.sin(t), np.zeros(segments)])
        apex = np.array([[0.25, 0.12, 1.1]])
        centroid = np.array([[0.0, 0.0, 0.0]])
        vertices = np.vstack([base, apex, centroid])
        ai, ci = segments, segments + 1
        faces = []
        for i in range(segments):
            j = (i + 1) % segments
            faces += [(i, j, ai), (ci, j, i)]
        return TriMesh(vertices=vertices, faces=np.array(faces))
    if name == "tetra_flag":
        vertices = np.array(
            [
                [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.2, 0.8, 0.0], [0.3, 0.25, 0.9],
                # thin flag off one edge
                [0.65, 0.1, 0.45], [0.95, 0.45, 0.65], [0.75, 0.3, 0.35],
            ]
        )
        faces = np.array(
            [
                (0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2),
                (4, 5, 6), (4, 6, 5),
            ]
        )
        return TriMesh(vertices=vertices, faces=faces)
    raise ValueError(f"unknown toy class {name!r}; choose from {TOY_CLASSES}")


def make_toy_dataset(
    classes: tuple[str, ...],
    per_class: int,
    noise_sigma: float = 0.01,
    seed: int = 0,
    points_per_cloud: int = 192,
) -> list[PointCloud]:
    """Labeled clouds sampled from jittered procedural meshes.

    Each instance gets a single +/-10% scale factor and Gaussian vertex
    noise before sampling; the recorded orientation is the identity.
    """
    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        base = _toy_mesh(name)
        for instance in range(per_class):
            scale = rng.uniform(0.9, 1.1)
            vertices = base.vertices * scale + rng.normal(0.0, noise_sigma, base.vertices.shape)
            mesh = TriMesh(vertices=vertices, faces=base.faces.copy())
            cloud = sample_surface(mesh, points_per_cloud, rng)
            cloud.label = label
            cloud.orientation = quat.IDENTITY.copy()
            cloud.meta = {"class_name": name, "instance": instance}
            clouds.append(cloud)
    return clouds


def rotate_cloud(cloud: PointCloud, g: np.ndarray) -> PointCloud:
    """Rigidly rotate a cloud (points, frames, recorded orientation) by ``g``."""
    lrf = None if cloud.lrf_quats is None else quat.canonicalize_hemisphere(
        quat.hamilton_product(g, cloud.lrf_quats)
    )
    orientation = None
    if cloud.orientation is not None:
        orientation = quat.hamilton_product(g, cloud.orientation)
    return PointCloud(
        points=quat.rotate_point(g, cloud.points),
        lrf_quats=lrf,
        label=cloud.label,
        orientation=orientation,
        meta=dict(cloud.meta),
    )


def patch_dropout(cloud: PointCloud, fraction: float, seed=0, patch_size: int = 16) -> PointCloud:
    """Remove contiguous regions (random seeds plus neighbors) totaling
    ``fraction`` of the points."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    if fraction == 0.0:
        return PointCloud(
            points=cloud.points.copy(),
            lrf_quats=None if cloud.lrf_quats is None else cloud.lrf_quats.copy(),
            label=cloud.label,
            orientation=None if cloud.orientation is None else cloud.orientation.copy(),
            meta=dict(cloud.meta),
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = cloud.n
    target = int(round(fraction * n))
    alive = np.ones(n, dtype=bool)
    removed = 0
    while removed < target:
        alive_idx = np.nonzero(alive)[0]
        center = alive_idx[rng.integers(len(alive_idx))]
        d2 = np.sum((cloud.points[alive_idx] - cloud.points[center]) ** 2, axis=1)
        take = min(patch_size, target - removed, len(alive_idx))
        victims = alive_idx[np.argsort(d2, kind="stable")[:take]]
        alive[victims] = False
        removed += len(victims)
    return PointCloud(
        points=cloud.points[alive],
        lrf_quats=None if cloud.lrf_quats is None else cloud.lrf_quats[alive],
        label=cloud.label,
        orientation=None if cloud.orientation is None else cloud.orientation.copy(),
        meta=dict(cloud.meta),
    )


# ---------------------------------------------------------------------------
# dataset manifests


def write_manifest(path, items: list[dict], classes: list[str]) -> None:
    """Items carry at least path/label/split; orientation rows optional."""
    atomic_write_text(
        path, json.dumps({"version": 1, "classes": classes, "items": items}, indent=2) + "\n"
    )


def read_manifest(path) -> tuple[list[str], list[dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("version") != 1:
        raise ValueError(f"{path}: unsupported manifest version {data.get('version')}")
    return data["classes"], data["items"]
