"""
Scene geometry: axis-aligned rooms, walls and boxes, file loading and the
ray/surface intersection machinery used by the forward tracer.

Nothing in this module knows about conductivities; path geometry computed from
a Scene is the same whatever sigma is later evaluated on it.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ElementTree
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .exceptions import SceneError

logger = logging.getLogger(__name__)

EPSILON_OFFSET = 1e-6
UNIT_TOLERANCE = 1e-9
_EXTENT_TOLERANCE = 1e-9

KINDS = ("floor", "wall", "box")

CANONICAL_ROOM = ((-5.0, -5.0, 0.0), (5.0, 5.0, 3.0))
CANONICAL_BOX_SIZE = (1.0, 2.0, 1.0)
CANONICAL_BOXES = (
    ("Box1", "Wood", (-3.0, 3.0)),
    ("Box2", "Concrete", (3.0, -3.0)),
    ("Box3", "Marble", (-3.0, -3.0)),
    ("Box4", "Chipboard", (3.0, 3.0)),
)
# Extra boxes for K > 9, in the order they are added.
EXTRA_BOX_MATERIALS = (
    "Plasterboard",
    "Glass_low_freq",
    "Floorboard",
    "Plywood",
    "Ceiling_board_low_freq",
    "Medium_dry_ground",
)
_EXTRA_BOX_SPOTS = tuple(
    (x, y)
    for y in (-3.0, 0.0, 3.0)
    for x in (-3.0, -1.5, 0.0, 1.5, 3.0)
    if not (abs(x) == 3.0 and abs(y) == 3.0)
)
_EXTRA_BOX_JITTER = 0.2


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    @classmethod
    def of(cls, values) -> Vec3:
        try:
            x, y, z = (float(v) for v in values)
        except (TypeError, ValueError) as e:
            raise SceneError(f"Expected three coordinates, got {values!r}") from e
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise SceneError(f"Non-finite coordinate in {values!r}")
        return cls(x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


@dataclass(frozen=True)
class Surface:
    """One axis-aligned rectangle.

    ``half_extents`` is zero along the normal axis and strictly positive along
    the two in-plane axes.
    """

    id: int
    material_slot: int
    center: Vec3
    normal: Vec3
    half_extents: Vec3

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.normal))
        if abs(norm - 1.0) > 1e-12:
            raise SceneError(f"Surface {self.id} normal is not unit length")
        if sorted(abs(c) for c in self.normal) != [0.0, 0.0, 1.0]:
            raise SceneError(f"Surface {self.id} is not axis-aligned")
        in_plane = [h for i, h in enumerate(self.half_extents) if i != self.axis]
        if min(in_plane) <= 0.0:
            raise SceneError(f"Surface {self.id} has a non-positive extent")

    @property
    def axis(self) -> int:
        return next(i for i, c in enumerate(self.normal) if c != 0.0)


@dataclass(frozen=True)
class SceneObject:
    name: str
    kind: str
    material: str
    material_slot: int
    center: Vec3
    size: Vec3
    surfaces: tuple[Surface, ...]

    @property
    def slot_name(self) -> str:
        return f"{self.name}_{self.material}"

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.center.as_array()
        half = self.size.as_array() / 2.0
        return c - half, c + half


class _SurfaceArrays(NamedTuple):
    axis: np.ndarray
    centers: np.ndarray
    normals: np.ndarray
    halves: np.ndarray
    slots: np.ndarray


@dataclass(frozen=True)
class Hit:
    surface_id: int
    distance: float
    point: Vec3
    normal: Vec3
    incidence_cos: float


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    room_min: Vec3
    room_max: Vec3
    name: str = field(default="scene", compare=False)

    def __post_init__(self):
        slots = sorted(obj.material_slot for obj in self.objects)
        if slots != list(range(len(self.objects))):
            raise SceneError("Material slots must be 0..K-1, one per object")
        names = [obj.slot_name for obj in self.objects]
        if len(set(names)) != len(names):
            raise SceneError(f"Duplicate material slot names in {names}")
        for obj in self.objects:
            for surface in obj.surfaces:
                if surface.material_slot != obj.material_slot:
                    raise SceneError(f"Surface {surface.id} of {obj.name} has a foreign slot")
        ids = [surface.id for surface in self.surfaces]
        if ids != list(range(len(ids))):
            raise SceneError(f"Surface ids must run 0..{len(ids) - 1} in object order, got {ids}")
        self._check_bounds()
        self._check_box_overlaps()

    def _check_bounds(self):
        room_lo = self.room_min.as_array()
        room_hi = self.room_max.as_array()
        if np.any(room_hi <= room_lo):
            raise SceneError("Room bounds are empty")
        for obj in self.objects:
            lo, hi = obj.bounds
            if obj.kind == "box":
                inside = (
                    np.all(lo[:2] > room_lo[:2])
                    and np.all(hi[:2] < room_hi[:2])
                    and lo[2] >= room_lo[2]
                    and hi[2] < room_hi[2]
                )
            else:
                inside = np.all(lo >= room_lo - _EXTENT_TOLERANCE) and np.all(
                    hi <= room_hi + _EXTENT_TOLERANCE
                )
            if not inside:
                raise SceneError(f"Object {obj.name!r} is outside room bounds")

    def _check_box_overlaps(self):
        boxes = self.boxes
        for i, first in enumerate(boxes):
            lo_a, hi_a = first.bounds
            for second in boxes[i + 1 :]:
                lo_b, hi_b = second.bounds
                if np.all(np.minimum(hi_a, hi_b) > np.maximum(lo_a, lo_b)):
                    raise SceneError(f"Boxes {first.name!r} and {second.name!r} overlap")

    @property
    def num_slots(self) -> int:
        return len(self.objects)

    @property
    def material_names(self) -> list[str]:
        by_slot = sorted(self.objects, key=lambda obj: obj.material_slot)
        return [obj.slot_name for obj in by_slot]

    @property
    def surfaces(self) -> tuple[Surface, ...]:
        return tuple(s for obj in self.objects for s in obj.surfaces)

    @property
    def boxes(self) -> tuple[SceneObject, ...]:
        return tuple(obj for obj in self.objects if obj.kind == "box")

    @cached_property
    def _surfaces_by_id(self) -> dict[int, Surface]:
        return {s.id: s for s in self.surfaces}

    def surface(self, surface_id: int) -> Surface:
        try:
            return self._surfaces_by_id[surface_id]
        except KeyError:
            raise SceneError(f"No surface with id {surface_id} in {self.name}") from None

    @cached_property
    def arrays(self) -> _SurfaceArrays:
        surfaces = self.surfaces
        return _SurfaceArrays(
            axis=np.array([s.axis for s in surfaces], dtype=int),
            centers=np.array([s.center for s in surfaces], dtype=float).reshape(-1, 3),
            normals=np.array([s.normal for s in surfaces], dtype=float).reshape(-1, 3),
            halves=np.array([s.half_extents for s in surfaces], dtype=float).reshape(-1, 3),
            slots=np.array([s.material_slot for s in surfaces], dtype=int),
        )

    def is_free(self, point, margin: float = 0.0) -> bool:
        """True when ``point`` is inside the room and outside every box.

        ``margin`` shrinks the room and grows the boxes by that many meters.
        """
        p = np.asarray(point, dtype=float)
        if np.any(p < self.room_min.as_array() + margin) or np.any(
            p > self.room_max.as_array() - margin
        ):
            return False
        for box in self.boxes:
            lo, hi = box.bounds
            if np.all(p > lo - margin) and np.all(p < hi + margin):
                return False
        return True


@dataclass(frozen=True)
class TrialConfig:
    """One measurement trial: a transmitter and the receivers listening to it."""

    tx: Vec3
    rx: tuple[Vec3, ...]

    @property
    def n(self) -> int:
        return len(self.rx)

    @property
    def points(self) -> list[Vec3]:
        return [self.tx, *self.rx]

    def to_dict(self) -> dict:
        return {"tx": list(self.tx), "rx": [list(p) for p in self.rx]}

    @classmethod
    def from_dict(cls, data: dict) -> TrialConfig:
        return cls(tx=Vec3.of(data["tx"]), rx=tuple(Vec3.of(p) for p in data["rx"]))


def _rectangle(surface_id, slot, center, size, room_center):
    axis = [i for i, s in enumerate(size) if s == 0.0]
    if len(axis) != 1:
        raise SceneError("A floor or wall needs exactly one zero size component")
    axis = axis[0]
    offset = room_center[axis] - center[axis]
    if offset == 0.0:
        raise SceneError("Cannot orient a rectangle through the room center")
    normal = [0.0, 0.0, 0.0]
    normal[axis] = math.copysign(1.0, offset)
    half = [s / 2.0 for s in size]
    return Surface(surface_id, slot, Vec3.of(center), Vec3.of(normal), Vec3.of(half))


def _box_faces(first_id, slot, center, size):
    cx, cy, cz = center
    sx, sy, sz = size
    top = cz + sz / 2.0
    mid = cz
    faces = [
        ((cx, cy, top), (0.0, 0.0, 1.0), (sx / 2, sy / 2, 0.0)),
        ((cx + sx / 2, cy, mid), (1.0, 0.0, 0.0), (0.0, sy / 2, sz / 2)),
        ((cx - sx / 2, cy, mid), (-1.0, 0.0, 0.0), (0.0, sy / 2, sz / 2)),
        ((cx, cy + sy / 2, mid), (0.0, 1.0, 0.0), (sx / 2, 0.0, sz / 2)),
        ((cx, cy - sy / 2, mid), (0.0, -1.0, 0.0), (sx / 2, 0.0, sz / 2)),
    ]
    return [
        Surface(first_id + i, slot, Vec3.of(c), Vec3.of(n), Vec3.of(h))
        for i, (c, n, h) in enumerate(faces)
    ]


def make_scene(object_specs, room_min, room_max, name="scene") -> Scene:
    """Build a Scene from ``{name, kind, material, center, size}`` dicts.

    Slots follow the order of ``object_specs``.
    """
    room_min = Vec3.of(room_min)
    room_max = Vec3.of(room_max)
    room_center = (room_min.as_array() + room_max.as_array()) / 2.0
    objects = []
    next_id = 0
    for slot, spec in enumerate(object_specs):
        kind = spec.get("kind", "box")
        if kind not in KINDS:
            raise SceneError(f"Unknown object kind {kind!r}")
        try:
            obj_name = str(spec["name"])
            material = str(spec["material"])
        except KeyError as e:
            raise SceneError(f"Object is missing field {e}") from e
        center = Vec3.of(spec["center"])
        size = Vec3.of(spec["size"])
        if kind == "box":
            if min(size) <= 0.0:
                raise SceneError(f"Box {obj_name!r} has a non-positive size")
            surfaces = _box_faces(next_id, slot, center, size)
        else:
            surfaces = [_rectangle(next_id, slot, center, size, room_center)]
        next_id += len(surfaces)
        objects.append(
            SceneObject(obj_name, kind, material, slot, center, size, tuple(surfaces))
        )
    return Scene(tuple(objects), room_min, room_max, name=name)


def _room_specs(room_min, room_max):
    (x0, y0, z0), (x1, y1, z1) = room_min, room_max
    cx, cy, cz = (x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2
    w, d, h = x1 - x0, y1 - y0, z1 - z0
    return [
        {"name": "Floor", "kind": "floor", "material": "Brick", "center": (cx, cy, z0), "size": (w, d, 0.0)},
        {"name": "Wall1", "kind": "wall", "material": "Brick", "center": (x0, cy, cz), "size": (0.0, d, h)},
        {"name": "Wall2", "kind": "wall", "material": "Brick", "center": (x1, cy, cz), "size": (0.0, d, h)},
        {"name": "Wall3", "kind": "wall", "material": "Brick", "center": (cx, y0, cz), "size": (w, 0.0, h)},
        {"name": "Wall4", "kind": "wall", "material": "Brick", "center": (cx, y1, cz), "size": (w, 0.0, h)},
    ]


def _box_spec(name, material, xy, size=CANONICAL_BOX_SIZE):
    return {
        "name": name,
        "kind": "box",
        "material": material,
        "center": (xy[0], xy[1], size[2] / 2.0),
        "size": size,
    }


def build_room_scene(num_objects: int = 9, seed: int = 0) -> Scene:
    """The 10 m x 10 m x 3 m brick room with ``num_objects - 5`` boxes.

    Up to four boxes use the canonical layout; further boxes go onto a
    seed-shuffled, jittered grid that avoids the canonical positions.
    """
    if not 5 <= num_objects <= 15:
        raise SceneError(f"num_objects must be in [5, 15], got {num_objects}")
    specs = _room_specs(*CANONICAL_ROOM)
    num_boxes = num_objects - 5
    for name, material, xy in CANONICAL_BOXES[:num_boxes]:
        specs.append(_box_spec(name, material, xy))
    extra = num_boxes - len(CANONICAL_BOXES)
    if extra > 0:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(_EXTRA_BOX_SPOTS))[:extra]
        jitter = rng.uniform(-_EXTRA_BOX_JITTER, _EXTRA_BOX_JITTER, size=(extra, 2))
        for i, spot in enumerate(order):
            x, y = _EXTRA_BOX_SPOTS[spot]
            specs.append(
                _box_spec(
                    f"Box{len(CANONICAL_BOXES) + i + 1}",
                    EXTRA_BOX_MATERIALS[i],
                    (x + jitter[i, 0], y + jitter[i, 1]),
                )
            )
    return make_scene(specs, *CANONICAL_ROOM, name=f"room_k{num_objects}")


def load_scene(path, format: str | None = None) -> Scene:  # noqa: A002
    """Load a scene from the canonical JSON format or the XML subset."""
    path = Path(path)
    fmt = format or ("xml" if path.suffix.lower() == ".xml" else "json")
    try:
        text = path.read_text()
    except OSError as e:
        raise SceneError(f"Failed to read scene file {path}: {e!s}") from e
    if fmt == "json":
        return parse_scene_json(text, name=path.stem)
    if fmt == "xml":
        return parse_scene_xml(text, name=path.stem)
    raise SceneError(f"Unsupported scene format {fmt!r}")


def parse_scene_json(text, name="scene"):
    try:
        data = json.loads(text)
        room = data["room"]
        objects = data["objects"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise SceneError(f"Failed to parse scene JSON: {e!s}") from e
    if not objects:
        raise SceneError("Scene file has no objects")
    return make_scene(objects, room["min"], room["max"], name=name)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "room": {"min": list(scene.room_min), "max": list(scene.room_max)},
        "objects": [
            {
                "name": obj.name,
                "material": obj.material,
                "center": list(obj.center),
                "size": list(obj.size),
                "kind": obj.kind,
            }
            for obj in scene.objects
        ],
    }


def _triplet(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _kind_from_filename(filename):
    stem = Path(filename).stem.lower()
    for kind, needles in (("floor", ("floor",)), ("wall", ("wall",)), ("box", ("box", "cube"))):
        if any(n in stem for n in needles):
            return kind
    raise SceneError(f"Unsupported shape file {filename!r}")


def _material_from_ref(ref_id):
    material = ref_id
    for prefix in ("mat-", "itu_"):
        if material.startswith(prefix):
            material = material[len(prefix) :]
    return material


def _parse_shape(elem):
    attrs = dict(elem.attrib)
    filename = attrs.pop("filename", None)
    translate = attrs.pop("translate", None)
    scale = attrs.pop("scale", None)
    material = attrs.pop("material", None)
    kind = attrs.pop("kind", None)
    name = attrs.pop("id", None)
    attrs.pop("type", None)
    if attrs:
        raise SceneError(f"Unsupported shape attributes: {sorted(attrs)}")

    for child in elem:
        if child.tag == "string" and child.get("name") == "filename":
            filename = child.get("value")
        elif child.tag == "transform":
            for op in child:
                values = " ".join(op.get(axis, "0") for axis in ("x", "y", "z"))
                if op.tag == "translate":
                    translate = values
                elif op.tag == "scale":
                    scale = values
                else:
                    raise SceneError(f"Unsupported transform <{op.tag}>")
        elif child.tag == "ref":
            material = _material_from_ref(child.get("id", ""))
        else:
            raise SceneError(f"Unsupported shape element <{child.tag}>")

    if filename is None or translate is None or scale is None or not material:
        raise SceneError("A shape needs filename, translate, scale and a material")
    kind = kind or _kind_from_filename(filename)
    return {
        "name": name or Path(filename).stem,
        "kind": kind,
        "material": material,
        "center": _triplet(translate),
        "size": _triplet(scale),
    }


def parse_scene_xml(text, name="scene"):
    try:
        # Scene XML is a trusted local file.
        root = ElementTree.fromstring(text)  # noqa: S314
    except ElementTree.ParseError as e:
        raise SceneError(f"Failed to parse scene XML: {e!s}") from e
    specs = []
    for elem in root:
        if elem.tag != "shape":
            raise SceneError(f"Unsupported scene element <{elem.tag}>")
        specs.append(_parse_shape(elem))
    if not specs:
        raise SceneError("Scene file has no objects")

    planes = [s for s in specs if s["kind"] != "box"]
    if not planes:
        raise SceneError("Scene XML needs a floor or walls to define the room")
    lows = np.array([np.subtract(s["center"], np.divide(s["size"], 2)) for s in planes])
    highs = np.array([np.add(s["center"], np.divide(s["size"], 2)) for s in planes])
    room_min, room_max = lows.min(axis=0), highs.max(axis=0)
    if room_max[2] <= room_min[2]:
        room_max[2] = room_min[2] + CANONICAL_ROOM[1][2]
    return make_scene(specs, room_min, room_max, name=name)


def scene_to_xml(scene: Scene) -> str:
    """Render the scene in the XML subset accepted by ``load_scene``."""
    root = ElementTree.Element("scene", version="1")
    for obj in scene.objects:
        ElementTree.SubElement(
            root,
            "shape",
            id=obj.name,
            kind=obj.kind,
            filename=f"meshes/{obj.kind}.ply",
            material=obj.material,
            translate=" ".join(f"{v:g}" for v in obj.center),
            scale=" ".join(f"{v:g}" for v in obj.size),
        )
    ElementTree.indent(root)
    return ElementTree.tostring(root, encoding="unicode")


def _check_unit(vector, label):
    v = np.asarray(vector, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise SceneError(f"{label} must be a finite 3-vector")
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOLERANCE:
        raise SceneError(f"{label} must be unit length")
    return v


def nearest_hits(scene: Scene, origins: np.ndarray, directions: np.ndarray):
    """Vectorized first hit for many rays.

    Returns ``(t, surface_index)``; misses have ``t = inf`` and index ``-1``.
    """
    arrays = scene.arrays
    count = len(origins)
    if len(arrays.axis) == 0 or count == 0:
        return np.full(count, np.inf), np.full(count, -1, dtype=int)
    surface_range = np.arange(len(arrays.axis))
    plane = arrays.centers[surface_range, arrays.axis]
    o_ax = origins[:, arrays.axis]
    d_ax = directions[:, arrays.axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane[None, :] - o_ax) / d_ax
    t = np.where(np.isfinite(t) & (t > EPSILON_OFFSET), t, np.inf)
    finite_t = np.where(np.isfinite(t), t, 0.0)
    points = origins[:, None, :] + finite_t[..., None] * directions[:, None, :]
    inside = np.all(
        np.abs(points - arrays.centers[None]) <= arrays.halves[None] + _EXTENT_TOLERANCE,
        axis=-1,
    )
    t = np.where(inside, t, np.inf)
    index = np.argmin(t, axis=1)
    best = t[np.arange(count), index]
    index = np.where(np.isfinite(best), index, -1)
    return best, index


def first_hit(scene: Scene, origin, direction) -> Hit | None:
    """Closest surface hit beyond EPSILON_OFFSET, or None when the ray escapes."""
    o = np.asarray(origin, dtype=float)
    d = _check_unit(direction, "direction")
    t, index = nearest_hits(scene, o[None, :], d[None, :])
    if index[0] < 0:
        return None
    surface = scene.surface(int(index[0]))
    normal = np.array(surface.normal, dtype=float)
    cos = float(np.dot(d, normal))
    if cos > 0.0:
        normal = -normal
    return Hit(
        surface_id=surface.id,
        distance=float(t[0]),
        point=Vec3.of(o + t[0] * d),
        normal=Vec3.of(normal),
        incidence_cos=abs(cos),
    )


def reflect_dir(direction, normal) -> Vec3:
    d = _check_unit(direction, "direction")
    n = _check_unit(normal, "normal")
    return Vec3.of(d - 2.0 * np.dot(d, n) * n)


def reflect_many(directions: np.ndarray, normals: np.ndarray) -> np.ndarray:
    dots = np.einsum("ij,ij->i", directions, normals)
    return directions - 2.0 * dots[:, None] * normals


def launch_directions(count: int) -> np.ndarray:
    """Fibonacci-sphere directions, shape ``(count, 3)``; no randomness."""
    if count < 1:
        raise SceneError(f"count must be >= 1, got {count}")
    i = np.arange(count, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / count
    radius = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    directions = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def mirror_point(point: np.ndarray, surface: Surface) -> np.ndarray:
    image = np.array(point, dtype=float)
    axis = surface.axis
    image[axis] = 2.0 * surface.center[axis] - image[axis]
    return image


def segment_blocked(scene: Scene, start: np.ndarray, end: np.ndarray) -> bool:
    """True when a surface sits strictly between ``start`` and ``end``."""
    delta = end - start
    length = float(np.linalg.norm(delta))
    if length <= EPSILON_OFFSET:
        return False
    t, index = nearest_hits(scene, start[None, :], (delta / length)[None, :])
    return bool(index[0] >= 0 and t[0] < length - EPSILON_OFFSET)
