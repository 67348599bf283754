"""Scene point clouds: parsing, object segmentation, attributes and boxes.

Points are stored as an ``(N, 6)`` float array of ``x, y, z, r, g, b`` with
colors in ``[0, 1]``. On disk (JSON and ASCII PLY) colors are 0-255 integers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PALETTE",
    "BBox3D",
    "ObjectAttributes",
    "SceneParseError",
    "ScenePointCloud",
    "SegmentedObject",
    "bbox_of",
    "compute_attributes",
    "generate_fixture_scene",
    "load_scene",
    "save_scene",
    "segment_objects",
]


class SceneParseError(ValueError):
    """Raised when a scene file cannot be parsed.

    ``location`` names the offending line (PLY) or record (JSON).
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScenePointCloud:
    scene_id: str
    points: np.ndarray
    labels: np.ndarray
    classes: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if points.ndim != 2 or points.shape[1] != 6:
            raise ValueError(f"points must have shape (N, 6), got {points.shape}")
        if len(points) == 0:
            raise ValueError("scene has no points")
        if labels.shape != (len(points),):
            raise ValueError("labels must have one entry per point")
        if not np.all(np.isfinite(points)):
            raise ValueError("non-finite coordinate or color")
        colors = points[:, 3:]
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise ValueError("colors must lie in [0, 1]")
        if labels.min() < -1:
            raise ValueError("labels must be >= -1")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "classes", {int(k): str(v) for k, v in self.classes.items()})

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SegmentedObject:
    object_id: int
    class_name: str
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 6 or len(points) == 0:
            raise ValueError("object needs a non-empty (M, 6) point array")
        if self.object_id < 0:
            raise ValueError("object_id must be >= 0")
        object.__setattr__(self, "points", _frozen(points))


Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class ObjectAttributes:
    center: Vec3
    size: Vec3
    mean_color: Vec3


@dataclass(frozen=True)
class BBox3D:
    center: Vec3
    extents: Vec3

    def __post_init__(self):
        if any(e < 0 for e in self.extents):
            raise ValueError(f"negative box extent: {self.extents}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))

    @property
    def volume(self) -> float:
        l, w, h = self.extents
        return l * w * h

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.extents) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.extents) / 2

    def to_list(self) -> list[float]:
        return [*self.center, *self.extents]

    @classmethod
    def from_list(cls, values) -> "BBox3D":
        values = [float(v) for v in values]
        return cls(tuple(values[:3]), tuple(values[3:6]))


# ---------------------------------------------------------------------------
# I/O


def _check_color(value: float, location: str) -> float:
    if not 0 <= value <= 255:
        raise SceneParseError(f"color value {value} outside 0-255", location)
    return value / 255.0


def _load_json(path: Path) -> ScenePointCloud:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneParseError(str(exc), f"{path}:{exc.lineno}") from exc
    if not isinstance(doc, dict) or "points" not in doc:
        raise SceneParseError("missing 'points' array", str(path))
    raw_points = doc["points"]
    labels = doc.get("labels", [-1] * len(raw_points))
    if len(labels) != len(raw_points):
        raise SceneParseError(
            f"{len(labels)} labels for {len(raw_points)} points", f"{path}:labels"
        )
    rows = []
    for i, rec in enumerate(raw_points):
        loc = f"{path}:points[{i}]"
        if not isinstance(rec, list) or len(rec) != 6:
            raise SceneParseError("expected [x, y, z, r, g, b]", loc)
        try:
            vals = [float(v) for v in rec]
        except (TypeError, ValueError) as exc:
            raise SceneParseError(f"non-numeric value in {rec!r}", loc) from exc
        if not all(math.isfinite(v) for v in vals[:3]):
            raise SceneParseError("non-finite coordinate", loc)
        rows.append(vals[:3] + [_check_color(v, loc) for v in vals[3:]])
    if not rows:
        raise SceneParseError("scene has no points", str(path))
    try:
        labels = [int(v) for v in labels]
    except (TypeError, ValueError) as exc:
        raise SceneParseError("non-integer label", f"{path}:labels") from exc
    classes = {int(k): v for k, v in doc.get("classes", {}).items()}
    scene_id = doc.get("scene_id", path.stem)
    return ScenePointCloud(scene_id, np.array(rows), np.array(labels), classes)


_PLY_REQUIRED = ("x", "y", "z", "red", "green", "blue", "object_id")


def _load_ply(path: Path) -> ScenePointCloud:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise SceneParseError("missing 'ply' magic", f"{path}:1")
    n_vertex = None
    props: list[str] = []
    classes: dict[int, str] = {}
    scene_id = path.stem
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise SceneParseError("only ascii PLY is supported", f"{path}:{lineno}")
        elif key == "comment":
            if len(parts) >= 4 and parts[1] == "class":
                try:
                    classes[int(parts[2])] = " ".join(parts[3:])
                except ValueError as exc:
                    raise SceneParseError("bad class comment", f"{path}:{lineno}") from exc
            elif len(parts) >= 3 and parts[1] == "scene_id":
                scene_id = parts[2]
        elif key == "element":
            if len(parts) != 3:
                raise SceneParseError("malformed element line", f"{path}:{lineno}")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(parts[2])
                except ValueError as exc:
                    raise SceneParseError("bad vertex count", f"{path}:{lineno}") from exc
        elif key == "property":
            if len(parts) < 3:
                raise SceneParseError("malformed property line", f"{path}:{lineno}")
            if in_vertex:
                props.append(parts[-1])
        elif key == "end_header":
            body_start = lineno
            break
        elif key == "obj_info":
            continue
        else:
            raise SceneParseError(f"unexpected header keyword {key!r}", f"{path}:{lineno}")
    if body_start is None:
        raise SceneParseError("missing end_header", str(path))
    if n_vertex is None:
        raise SceneParseError("missing vertex element", str(path))
    missing = [p for p in _PLY_REQUIRED if p not in props]
    if missing:
        raise SceneParseError(f"missing vertex properties {missing}", str(path))
    col = {name: props.index(name) for name in _PLY_REQUIRED}
    body = lines[body_start:body_start + n_vertex]
    if len(body) < n_vertex:
        raise SceneParseError(
            f"expected {n_vertex} vertices, found {len(body)}", f"{path}:{body_start + len(body) + 1}"
        )
    rows, labels = [], []
    for offset, line in enumerate(body):
        loc = f"{path}:{body_start + offset + 1}"
        parts = line.split()
        if len(parts) != len(props):
            raise SceneParseError(f"expected {len(props)} values, got {len(parts)}", loc)
        try:
            xyz = [float(parts[col[a]]) for a in "xyz"]
            rgb = [float(parts[col[c]]) for c in ("red", "green", "blue")]
            label = int(parts[col["object_id"]])
        except ValueError as exc:
            raise SceneParseError(f"non-numeric value in {line!r}", loc) from exc
        if not all(math.isfinite(v) for v in xyz):
            raise SceneParseError("non-finite coordinate", loc)
        rows.append(xyz + [_check_color(v, loc) for v in rgb])
        labels.append(label)
    if not rows:
        raise SceneParseError("scene has no points", str(path))
    return ScenePointCloud(scene_id, np.array(rows), np.array(labels), classes)


def load_scene(path: str | Path, format: str | None = None) -> ScenePointCloud:
    """Load a scene from ``json`` or ``ply-ascii``; format defaults to the file suffix."""
    path = Path(path)
    if format is None:
        format = "ply-ascii" if path.suffix.lower() == ".ply" else "json"
    if format == "json":
        return _load_json(path)
    if format in ("ply", "ply-ascii"):
        return _load_ply(path)
    raise ValueError(f"unknown scene format {format!r}")


def _color_bytes(rgb: np.ndarray) -> np.ndarray:
    return np.rint(rgb * 255).astype(np.int64)


def save_scene(scene: ScenePointCloud, path: str | Path, format: str | None = None) -> Path:
    """Write ``scene`` as JSON or ASCII PLY. Coordinates are written with ``repr`` precision."""
    path = Path(path)
    if format is None:
        format = "ply-ascii" if path.suffix.lower() == ".ply" else "json"
    colors = _color_bytes(scene.rgb)
    if format == "json":
        doc = {
            "scene_id": scene.scene_id,
            "points": [
                [*map(float, p[:3]), *map(int, c)] for p, c in zip(scene.points, colors)
            ],
            "labels": [int(v) for v in scene.labels],
            "classes": {str(k): v for k, v in sorted(scene.classes.items())},
        }
        path.write_text(json.dumps(doc))
        return path
    header = ["ply", "format ascii 1.0", f"comment scene_id {scene.scene_id}"]
    header += [f"comment class {k} {v}" for k, v in sorted(scene.classes.items())]
    header += [
        f"element vertex {len(scene)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int object_id",
        "end_header",
    ]
    body = [
        f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]} {int(lab)}"
        for p, c, lab in zip(scene.points, colors, scene.labels)
    ]
    path.write_text("\n".join(header + body) + "\n")
    return path


# ---------------------------------------------------------------------------
# Segmentation and attributes


def segment_objects(scene: ScenePointCloud) -> list[SegmentedObject]:
    """Partition the labeled points by object id, ascending; unlabeled (-1) points are dropped."""
    objects = []
    for label in np.unique(scene.labels):
        if label < 0:
            continue
        mask = scene.labels == label
        name = scene.classes.get(int(label), "object")
        objects.append(SegmentedObject(int(label), name, scene.points[mask]))
    return objects


def compute_attributes(obj: SegmentedObject) -> ObjectAttributes:
    if len(obj.points) == 0:
        raise ValueError("cannot compute attributes of an empty object")
    xyz = obj.points[:, :3]
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    center = (lo + hi) / 2
    size = hi - lo
    color = obj.points[:, 3:].mean(axis=0)
    return ObjectAttributes(
        center=tuple(float(v) for v in center),
        size=tuple(float(v) for v in size),
        mean_color=tuple(float(v) for v in color),
    )


def bbox_of(attrs: ObjectAttributes) -> BBox3D:
    return BBox3D(center=attrs.center, extents=attrs.size)


# ---------------------------------------------------------------------------
# Fixture scenes

# (class name, color name, RGB 0-255)
PALETTE: tuple[tuple[str, str, tuple[int, int, int]], ...] = (
    ("chair", "red", (200, 30, 30)),
    ("table", "brown", (140, 90, 40)),
    ("sofa", "blue", (40, 60, 190)),
    ("bed", "white", (235, 235, 235)),
    ("desk", "beige", (215, 195, 150)),
    ("cabinet", "gray", (128, 128, 128)),
    ("bookshelf", "green", (40, 150, 60)),
    ("lamp", "yellow", (230, 210, 40)),
    ("toilet", "white", (245, 245, 250)),
    ("sink", "gray", (150, 150, 155)),
    ("bathtub", "white", (240, 240, 240)),
    ("door", "brown", (120, 75, 30)),
    ("window", "blue", (120, 170, 230)),
    ("curtain", "purple", (120, 50, 140)),
    ("refrigerator", "silver", (190, 190, 200)),
    ("monitor", "black", (20, 20, 20)),
    ("pillow", "orange", (240, 140, 30)),
    ("box", "brown", (160, 110, 60)),
    ("trash can", "black", (35, 35, 35)),
    ("plant", "green", (30, 120, 40)),
)

_ROOM = 8.0


def _boxes_overlap(a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray], gap: float) -> bool:
    return bool(np.all(a[0] - gap < b[1]) and np.all(b[0] - gap < a[1]))


def generate_fixture_scene(
    seed: int,
    n_objects: int = 8,
    points_per_object: int = 200,
    scene_id: str | None = None,
    classes: list[int] | None = None,
) -> tuple[ScenePointCloud, list[tuple[str, BBox3D]]]:
    """Build a synthetic room of axis-aligned cuboid objects.

    Each object contributes two opposite cuboid corners plus uniform samples
    from its volume, so the point AABB equals the ground-truth box exactly.
    Box geometry lies on a 0.01 grid, the resolution of the grounding answer format.
    ``classes`` optionally pins palette indices per object.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if points_per_object < 2:
        raise ValueError("points_per_object must be >= 2")
    rng = np.random.default_rng(seed)
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    points, labels, gt = [], [], []
    class_map: dict[int, str] = {}
    for obj_id in range(n_objects):
        pal = classes[obj_id] if classes is not None else int(rng.integers(len(PALETTE)))
        name, _, rgb = PALETTE[pal]
        for _attempt in range(200):
            # sizes on a 0.02 grid put every center and extent on the 0.01 grid
            size = rng.integers(15, 81, size=3) * 0.02
            xy = rng.uniform(size[:2] / 2, _ROOM - size[:2] / 2).round(2)
            center = np.array([xy[0], xy[1], size[2] / 2])
            lo, hi = center - size / 2, center + size / 2
            if not any(_boxes_overlap((lo, hi), other, 0.05) for other in placed):
                break
        placed.append((lo, hi))
        inner = rng.uniform(lo, hi, size=(points_per_object - 2, 3))
        xyz = np.vstack([lo, hi, inner])
        color = np.tile(np.asarray(rgb, dtype=np.float64) / 255.0, (points_per_object, 1))
        points.append(np.hstack([xyz, color]))
        labels.append(np.full(points_per_object, obj_id))
        class_map[obj_id] = name
        gt.append((name, BBox3D(tuple(center), tuple(hi - lo))))
    scene = ScenePointCloud(
        scene_id or f"scene{seed:04d}",
        np.vstack(points),
        np.concatenate(labels),
        class_map,
    )
    return scene, gt
