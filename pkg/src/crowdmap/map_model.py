"""Geometric data model: poses, Laplace-scaled vertices, polyline elements, maps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from crowdmap import polyline
from crowdmap.polyline import resample_fixed

V = 20
"""Fixed number of vertices per map element."""

DEFAULT_RANGE_LON = 36.0
DEFAULT_RANGE_LAT = 18.0


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


def rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform mapping ego coordinates into a parent frame."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> Pose2:
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rotation(self.yaw)

    def compose(self, other: Pose2) -> Pose2:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        t = self.rotation @ other.translation + self.translation
        return Pose2(t[0], t[1], self.yaw + other.yaw)

    def inverse(self) -> Pose2:
        t = -(self.rotation.T @ self.translation)
        return Pose2(t[0], t[1], -self.yaw)

    def apply(self, points) -> np.ndarray:
        """Transform ``(N, >=2)`` points; columns past xy are passed through."""
        pts = np.array(points, dtype=float, copy=True)
        pts[..., :2] = pts[..., :2] @ self.rotation.T + self.translation
        return pts

    def delta(self, other: Pose2) -> Pose2:
        """Pose of ``other`` expressed in this pose's frame."""
        return self.inverse().compose(other)


@dataclass(frozen=True)
class LaplaceScale:
    bx: float
    by: float

    def __post_init__(self):
        if not (self.bx > 0.0 and self.by > 0.0):
            raise ValueError(f"Laplace scales must be positive, got ({self.bx}, {self.by})")

    @property
    def variance(self) -> tuple[float, float]:
        return 2.0 * self.bx**2, 2.0 * self.by**2

    @classmethod
    def from_variance(cls, var_x: float, var_y: float) -> LaplaceScale:
        return cls(math.sqrt(var_x / 2.0), math.sqrt(var_y / 2.0))


@dataclass(frozen=True)
class MapVertex:
    position: tuple[float, float, float]
    scale: LaplaceScale

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.position[:2])


class ElementClass(str, Enum):
    PED = "ped"
    DIV = "div"
    BOU = "bou"

    @property
    def label(self) -> str:
        return {"ped": "PedestrianCrossing", "div": "Divider", "bou": "Boundary"}[self.value]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MapElement:
    """A polyline map element with exactly ``V`` Laplace-scaled vertices.

    ``points`` is ``(V, 3)`` (x, y, z) and ``scales`` is ``(V, 2)`` (bx, by).
    """

    id: str
    cls: ElementClass
    points: np.ndarray
    scales: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 2 and pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        scales = np.asarray(self.scales, dtype=float)
        if scales.ndim <= 1:
            scales = np.broadcast_to(scales, (len(pts), 2))
        if pts.shape != (V, 3):
            raise ValueError(f"element {self.id!r}: expected ({V}, 3) points, got {pts.shape}")
        if scales.shape != (V, 2):
            raise ValueError(f"element {self.id!r}: expected ({V}, 2) scales, got {scales.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"element {self.id!r}: non-finite coordinates")
        if not np.all(scales > 0.0):
            raise ValueError(f"element {self.id!r}: scales must be positive")
        if np.any(np.all(np.diff(pts[:, :2], axis=0) == 0.0, axis=1)):
            raise ValueError(f"element {self.id!r}: consecutive duplicate vertices")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"element {self.id!r}: confidence outside [0, 1]")
        object.__setattr__(self, "cls", ElementClass(self.cls))
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "scales", _frozen(scales))
        object.__setattr__(self, "confidence", float(self.confidence))

    @classmethod
    def from_polyline(cls, id, klass, points, scales=0.05, confidence=1.0) -> MapElement:
        """Build an element from an arbitrary polyline, resampling to ``V``."""
        pts = np.asarray(points, dtype=float)
        if pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        sc = np.broadcast_to(np.asarray(scales, dtype=float), (len(pts), 2))
        data = resample_fixed(np.column_stack([pts, sc]), V)
        return cls(id, ElementClass(klass), data[:, :3], data[:, 3:5], confidence)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def vertices(self) -> list[MapVertex]:
        return [self.vertex(k) for k in range(V)]

    def vertex(self, k: int) -> MapVertex:
        return MapVertex(tuple(self.points[k]), LaplaceScale(*self.scales[k]))

    @property
    def length(self) -> float:
        return polyline.length(self.points)

    def stacked(self) -> np.ndarray:
        """``(V, 5)`` array of x, y, z, bx, by."""
        return np.column_stack([self.points, self.scales])

    def reversed(self) -> MapElement:
        return replace(self, points=self.points[::-1], scales=self.scales[::-1])

    def with_geometry(self, points=None, scales=None, **changes) -> MapElement:
        return replace(
            self,
            points=self.points if points is None else points,
            scales=self.scales if scales is None else scales,
            **changes,
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "class": self.cls.value,
            "vertices": self.points.tolist(),
            "scales": self.scales.tolist(),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MapElement:
        return cls(
            id=str(d["id"]),
            cls=ElementClass(d["class"]),
            points=d["vertices"],
            scales=d["scales"],
            confidence=float(d.get("confidence", 1.0)),
        )

    def same_as(self, other: MapElement, atol: float = 0.0) -> bool:
        return (
            self.id == other.id
            and self.cls == other.cls
            and np.allclose(self.points, other.points, rtol=0.0, atol=atol)
            and np.allclose(self.scales, other.scales, rtol=0.0, atol=atol)
            and abs(self.confidence - other.confidence) <= atol
        )


@dataclass(frozen=True, eq=False)
class VectorMap:
    elements: tuple[MapElement, ...] = ()
    version: int = 0
    frame: str = "world"

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if self.frame not in ("ego", "world"):
            raise ValueError(f"unknown frame tag {self.frame!r}")
        ids = [e.id for e in self.elements]
        if len(set(ids)) != len(ids):
            raise ValueError("element ids must be unique within a map")

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    @cached_property
    def by_id(self) -> dict[str, MapElement]:
        return {e.id: e for e in self.elements}

    @cached_property
    def xy_stack(self) -> np.ndarray:
        """``(n, V, 2)`` vertex coordinates of all elements."""
        if not self.elements:
            return np.empty((0, V, 2))
        return np.stack([e.points[:, :2] for e in self.elements])

    def __getitem__(self, element_id: str) -> MapElement:
        return self.by_id[element_id]

    def __contains__(self, element_id) -> bool:
        return element_id in self.by_id

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.elements]

    def with_elements(self, elements: Iterable[MapElement], **changes) -> VectorMap:
        return replace(self, elements=tuple(elements), **changes)

    def of_class(self, cls: ElementClass) -> list[MapElement]:
        return [e for e in self.elements if e.cls == cls]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "frame": self.frame,
            "elements": [e.to_dict() for e in self.elements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> VectorMap:
        return cls(
            elements=tuple(MapElement.from_dict(e) for e in d.get("elements", [])),
            version=int(d.get("version", 0)),
            frame=d.get("frame", "world"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> VectorMap:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> VectorMap:
        return cls.loads(Path(path).read_text())

    def same_as(self, other: VectorMap, atol: float = 0.0) -> bool:
        if (self.version, self.frame, self.ids) != (other.version, other.frame, other.ids):
            return False
        return all(a.same_as(b, atol) for a, b in zip(self.elements, other.elements))


def transform_element(pose: Pose2, element: MapElement) -> MapElement:
    """Rotate by ``pose.yaw`` then translate; z and scales are untouched."""
    return element.with_geometry(points=pose.apply(element.points))


def transform_map(pose: Pose2, vmap: VectorMap, frame: str) -> VectorMap:
    return vmap.with_elements((transform_element(pose, e) for e in vmap), frame=frame)


def box_bounds(range_lon: float, range_lat: float) -> tuple[np.ndarray, np.ndarray]:
    return np.array([-range_lon, -range_lat]), np.array([range_lon, range_lat])


def clip_element(element: MapElement, lo, hi, min_length: float = 0.0) -> MapElement | None:
    """Clip an element to a box, keep the longest inside piece, resample to ``V``."""
    pieces = polyline.clip_to_box(element.stacked(), lo, hi)
    if not pieces:
        return None
    best = max(pieces, key=polyline.length)
    if polyline.length(best) <= min_length:
        return None
    data = resample_fixed(best, V)
    return element.with_geometry(points=data[:, :3], scales=data[:, 3:5])


def crop_map(
    vmap: VectorMap,
    pose: Pose2,
    range_lon: float = DEFAULT_RANGE_LON,
    range_lat: float = DEFAULT_RANGE_LAT,
    clip: bool = True,
    min_length: float = 0.0,
) -> VectorMap:
    """Elements of a world map intersecting the ego box around ``pose``.

    The result is in the ego frame of ``pose``. With ``clip`` the
    polylines are cut at the box boundary (the longest inside piece is kept
    and resampled to ``V``); without it, intersecting elements are returned
    whole.
    """
    if not (range_lon > 0 and range_lat > 0):
        raise ValueError("crop ranges must be positive")
    lo, hi = box_bounds(range_lon, range_lat)
    to_ego = pose.inverse()
    if not len(vmap):
        return vmap.with_elements((), frame="ego")
    local_xy = to_ego.apply(vmap.xy_stack.reshape(-1, 2)).reshape(vmap.xy_stack.shape)
    bmin = local_xy.min(axis=1)
    bmax = local_xy.max(axis=1)
    touches = np.all((bmax >= lo) & (bmin <= hi), axis=1)
    inside = np.all((bmin >= lo) & (bmax <= hi), axis=1)
    out = []
    for i in np.flatnonzero(touches):
        element = vmap.elements[i]
        pts = element.points.copy()
        pts[:, :2] = local_xy[i]
        local = element.with_geometry(points=pts)
        if inside[i] or not clip:
            if not clip and not polyline.clip_to_box(local.points, lo, hi):
                continue
            if clip and local.length <= min_length:
                continue
            out.append(local)
            continue
        local = clip_element(local, lo, hi, min_length)
        if local is not None:
            out.append(local)
    return vmap.with_elements(out, frame="ego")


def chamfer_distance(a, b) -> float:
    """Symmetric vertex-to-vertex Chamfer distance in xy."""
    pa = a.xy if isinstance(a, MapElement) else np.asarray(a, dtype=float)[:, :2]
    pb = b.xy if isinstance(b, MapElement) else np.asarray(b, dtype=float)[:, :2]
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def chamfer_matrix(a, b) -> np.ndarray:
    """Pairwise Chamfer distances between two stacks of ``(n, V, 2)`` and ``(m, W, 2)`` vertices."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    (n, va, _), (m, vb, _) = a.shape, b.shape
    d = cdist(a.reshape(-1, 2), b.reshape(-1, 2)).reshape(n, va, m, vb)
    return 0.5 * (d.min(axis=3).mean(axis=1) + d.min(axis=1).mean(axis=2))


def stack_xy(elements) -> np.ndarray:
    elements = list(elements)
    if not elements:
        return np.empty((0, V, 2))
    return np.stack([e.points[:, :2] for e in elements])


def laplace_nll(pred: MapVertex, truth: Sequence[float]) -> float:
    """Per-vertex Laplace negative log-likelihood summed over x and y."""
    bx, by = pred.scale.bx, pred.scale.by
    if bx <= 0 or by <= 0:
        raise ValueError("Laplace scale must be positive")
    total = 0.0
    for mu, b, m in ((pred.position[0], bx, truth[0]), (pred.position[1], by, truth[1])):
        total += math.log(2.0 * b) + abs(m - mu) / b
    return total
