"""Synthetic stand-in for an online mapping network.

Generates ground-truth worlds and trajectories, applies map change events,
and produces per-frame noisy observations with honest per-vertex Laplace
scales, existence confidences and perturbed initial poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Union

import numpy as np

from crowdmap.association import cut_ends
from crowdmap.map_model import (
    chamfer_matrix,
    DEFAULT_RANGE_LAT,
    DEFAULT_RANGE_LON,
    V,
    ElementClass,
    MapElement,
    Pose2,
    VectorMap,
    chamfer_distance,
    crop_map,
)

WORLD_SCALE = 0.05


@dataclass(frozen=True)
class NoiseConfig:
    sigma_lat: float = 0.75
    sigma_lon: float = 1.5
    sigma_yaw: float = 0.85  # degrees
    vertex_scale_range: tuple[float, float] = (0.05, 0.3)
    dropout_prob: float = 0.05
    fake_prob: float = 0.03
    confidence_model: tuple[float, float] = (0.85, 0.2)
    confidence_sd: float = 0.08
    vertex_noise: bool = True
    # recorded scale = generating scale * miscalibration
    scale_miscalibration: float = 1.0
    # prior elements absent from the world are echoed back (low confidence)
    # with this probability, shifted by echo_offset (lon, lat) in the ego frame
    echo_prob: float = 0.5
    echo_offset: tuple[float, float] = (0.0, 0.0)
    stale_tol: float = 1.0
    fake_min_distance: float = 3.0
    min_visible_length: float = 2.0
    range_lon: float = DEFAULT_RANGE_LON
    range_lat: float = DEFAULT_RANGE_LAT

    def __post_init__(self):
        object.__setattr__(self, "vertex_scale_range", tuple(float(v) for v in self.vertex_scale_range))
        object.__setattr__(self, "confidence_model", tuple(float(v) for v in self.confidence_model))
        object.__setattr__(self, "echo_offset", tuple(float(v) for v in self.echo_offset))
        if min(self.sigma_lat, self.sigma_lon, self.sigma_yaw) < 0:
            raise ValueError("pose noise sigmas must be non-negative")
        b_min, b_max = self.vertex_scale_range
        if not (0 < b_min <= b_max):
            raise ValueError("vertex_scale_range must satisfy 0 < b_min <= b_max")
        for name in ("dropout_prob", "fake_prob", "echo_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.scale_miscalibration <= 0:
            raise ValueError("scale_miscalibration must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> NoiseConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown noise config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def noiseless(cls, **overrides) -> NoiseConfig:
        base = dict(
            sigma_lat=0.0,
            sigma_lon=0.0,
            sigma_yaw=0.0,
            vertex_scale_range=(0.05, 0.05),
            dropout_prob=0.0,
            fake_prob=0.0,
            echo_prob=0.0,
            confidence_sd=0.0,
            vertex_noise=False,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class InsertElement:
    cls: ElementClass
    geometry: np.ndarray  # (N, 2|3) world-frame polyline

    def __post_init__(self):
        object.__setattr__(self, "cls", ElementClass(self.cls))
        g = np.asarray(self.geometry, dtype=float)
        if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] not in (2, 3) or not np.all(np.isfinite(g)):
            raise ValueError("insert geometry must be a finite (N>=2, 2|3) polyline")
        object.__setattr__(self, "geometry", g)


@dataclass(frozen=True)
class DeleteElement:
    id: str


ChangeOp = Union[InsertElement, DeleteElement]


@dataclass(frozen=True)
class ChangeSpec:
    ops: tuple = ()
    effective_from: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> ChangeSpec:
        ops = []
        for op in d.get("ops", []):
            kind = op["op"]
            if kind == "delete":
                ops.append(DeleteElement(op["id"]))
            elif kind == "insert":
                ops.append(InsertElement(ElementClass(op["class"]), np.asarray(op["geometry"], dtype=float)))
            else:
                raise ValueError(f"unknown change op {kind!r}")
        return cls(tuple(ops), int(d.get("effective_from", 0)))


@dataclass
class TraversalFrame:
    """One simulated observation.

    ``obs`` is in the ego frame of ``gt_pose``; its per-vertex scales are
    the recorded uncertainties. ``sources`` maps observation ids to the
    world element they were drawn from (``None`` for hallucinations).
    """

    obs: VectorMap
    gt_pose: Pose2
    init_pose: Pose2
    index: int = 0
    traversal: int = 0
    sources: dict = field(default_factory=dict)


def sample_init_pose(gt: Pose2, cfg: NoiseConfig, rng: np.random.Generator) -> Pose2:
    """Perturb ``gt`` by heading-frame Gaussian offsets (lon, lat, yaw in degrees)."""
    d_lon = rng.normal(0.0, cfg.sigma_lon)
    d_lat = rng.normal(0.0, cfg.sigma_lat)
    d_yaw = math.radians(rng.normal(0.0, cfg.sigma_yaw))
    return gt.compose(Pose2(d_lon, d_lat, d_yaw))


def _confidence(mean: float, cfg: NoiseConfig, rng) -> float:
    if cfg.confidence_sd == 0:
        return float(np.clip(mean, 0.0, 1.0))
    return float(np.clip(rng.normal(mean, cfg.confidence_sd), 0.01, 1.0))


def _perturb(element: MapElement, cfg: NoiseConfig, rng, new_id: str, confidence: float) -> MapElement:
    b_min, b_max = cfg.vertex_scale_range
    true_scale = rng.uniform(b_min, b_max, size=(V, 2))
    pts = np.array(element.points)
    if cfg.vertex_noise:
        pts[:, :2] += rng.laplace(0.0, true_scale)
    # ends cut by the perception range stay on its boundary
    lon, lat = cfg.range_lon, cfg.range_lat
    for k, is_cut in zip((0, V - 1), cut_ends(element, lon, lat)):
        if is_cut:
            clean = element.points[k]
            if abs(clean[0]) >= lon - 1e-6:
                pts[k, 0] = math.copysign(lon, clean[0])
            if abs(clean[1]) >= lat - 1e-6:
                pts[k, 1] = math.copysign(lat, clean[1])
    return MapElement(new_id, element.cls, pts, true_scale * cfg.scale_miscalibration, confidence)


def _random_fake(true_elements, cfg: NoiseConfig, rng) -> MapElement | None:
    for _ in range(20):
        cls = list(ElementClass)[rng.integers(3)]
        center = rng.uniform([-cfg.range_lon * 0.8, -cfg.range_lat * 0.8], [cfg.range_lon * 0.8, cfg.range_lat * 0.8])
        heading = rng.uniform(-math.pi, math.pi)
        half = rng.uniform(3.0, 7.5)
        d = np.array([math.cos(heading), math.sin(heading)])
        cand = MapElement.from_polyline("fake", cls, [center - half * d, center + half * d], WORLD_SCALE)
        if all(chamfer_distance(cand, e) >= cfg.fake_min_distance for e in true_elements):
            return cand
    return None


def stale_elements(prior_local: VectorMap, world_local: VectorMap, tol: float) -> list[MapElement]:
    """Prior elements with no same-class world element within Chamfer ``tol``."""
    pe, we = prior_local.elements, world_local.elements
    dist = chamfer_matrix(prior_local.xy_stack, world_local.xy_stack)
    out = []
    for i, p in enumerate(pe):
        peers = [dist[i, j] for j, w in enumerate(we) if w.cls == p.cls]
        if not peers or min(peers) > tol:
            out.append(p)
    return out


def synthesize_frame(
    world: VectorMap,
    gt_pose: Pose2,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    prior: VectorMap | None = None,
    index: int = 0,
    traversal: int = 0,
) -> TraversalFrame:
    """Simulate one noisy ego-frame observation of ``world`` from ``gt_pose``.

    Independent child streams drive the pose, per-element noise,
    hallucinations and prior echoes, so toggling one feature does not
    reshuffle the others.
    """
    pose_rng, noise_rng, fake_rng, echo_rng = rng.spawn(4)
    init = sample_init_pose(gt_pose, cfg, pose_rng)
    visible = crop_map(world, gt_pose, cfg.range_lon, cfg.range_lat, min_length=cfg.min_visible_length)

    out: list[MapElement] = []
    sources: dict = {}
    matched_mean, fake_mean = cfg.confidence_model
    for element in visible:
        if noise_rng.random() < cfg.dropout_prob:
            continue
        oid = f"o{len(out):03d}"
        conf = _confidence(matched_mean, cfg, noise_rng)
        out.append(_perturb(element, cfg, noise_rng, oid, conf))
        sources[oid] = element.id

    n_fake = fake_rng.binomial(len(visible), cfg.fake_prob) if len(visible) else 0
    for _ in range(n_fake):
        fake = _random_fake(list(visible), cfg, fake_rng)
        if fake is None:
            continue
        oid = f"o{len(out):03d}"
        out.append(_perturb(fake, cfg, fake_rng, oid, _confidence(fake_mean, cfg, fake_rng)))
        sources[oid] = None

    if prior is not None and cfg.echo_prob > 0:
        prior_vis = crop_map(prior, gt_pose, cfg.range_lon, cfg.range_lat, min_length=cfg.min_visible_length)
        offset = np.array([cfg.echo_offset[0], cfg.echo_offset[1], 0.0])
        for stale in stale_elements(prior_vis, visible, cfg.stale_tol):
            if echo_rng.random() >= cfg.echo_prob:
                continue
            oid = f"o{len(out):03d}"
            shifted = stale.with_geometry(points=stale.points + offset)
            out.append(_perturb(shifted, cfg, echo_rng, oid, _confidence(fake_mean, cfg, echo_rng)))
            sources[oid] = None

    obs = VectorMap(tuple(out), version=0, frame="ego")
    return TraversalFrame(obs, gt_pose, init, index, traversal, sources)


def apply_changes(world: VectorMap, spec: ChangeSpec) -> VectorMap:
    """Apply deletions and insertions; inserted elements get fresh ids."""
    elements = list(world.elements)
    ids = {e.id for e in elements}
    counter = 0
    for op in spec.ops:
        if isinstance(op, DeleteElement):
            if op.id not in ids:
                raise KeyError(f"cannot delete unknown element {op.id!r}")
            elements = [e for e in elements if e.id != op.id]
            ids.discard(op.id)
        elif isinstance(op, InsertElement):
            while True:
                new_id = f"ins-v{world.version + 1}-{counter}"
                counter += 1
                if new_id not in ids:
                    break
            elements.append(MapElement.from_polyline(new_id, op.cls, op.geometry, WORLD_SCALE))
            ids.add(new_id)
        else:
            raise TypeError(f"unsupported change op {op!r}")
    return world.with_elements(elements, version=world.version + 1)


@dataclass(frozen=True)
class RoadLayout:
    boundary_offsets: tuple[float, ...] = (-7.0, 7.0)
    divider_offsets: tuple[float, ...] = (-3.5, 0.0, 3.5)
    segment_length: float = 20.0
    segment_gap: float = 2.0
    crosswalk_spacing: float = 45.0
    crosswalk_half_width: float = 6.5
    radius: float = 80.0


def _segments(length: float, seg: float, gap: float, phase: float) -> list[tuple[float, float]]:
    out = []
    start = -phase
    while start < length:
        a, b = max(start, 0.0), min(start + seg, length)
        if b - a >= 0.25 * seg:
            out.append((a, b))
        start += seg + gap
    return out


def generate_scenario(
    kind: str, length: float, rng: np.random.Generator, layout: RoadLayout | None = None, spacing: float = 2.0
):
    """Build a ground-truth world and a centerline trajectory sampled every ``spacing`` m.

    ``straight`` lays lines parallel to the x axis; ``turning`` bends the
    same layout around a left-hand circular arc of ``layout.radius``
    centred at ``(0, radius)``. Element positions along the road are
    jittered by ``rng``.
    """
    if not length > 0:
        raise ValueError("scenario length must be positive")
    if kind not in ("straight", "turning"):
        raise ValueError(f"unknown scenario kind {kind!r}")
    if not spacing > 0:
        raise ValueError("frame spacing must be positive")
    layout = layout or RoadLayout()
    R = layout.radius

    def place(s, d):
        """Centerline arclength ``s`` and left offset ``d`` to world xy."""
        s = np.asarray(s, dtype=float)
        if kind == "straight":
            return np.column_stack([s, np.full_like(s, d)])
        phi = s / R
        return np.column_stack([(R - d) * np.sin(phi), R - (R - d) * np.cos(phi)])

    elements = []
    lines = [(ElementClass.BOU, d) for d in layout.boundary_offsets]
    lines += [(ElementClass.DIV, d) for d in layout.divider_offsets]
    for li, (cls, d) in enumerate(lines):
        phase = rng.uniform(0.0, layout.segment_length + layout.segment_gap)
        for k, (a, b) in enumerate(_segments(length, layout.segment_length, layout.segment_gap, phase)):
            s = np.linspace(a, b, V)
            elements.append(MapElement(f"{cls.value}-{li}-{k}", cls, place(s, d), WORLD_SCALE))

    s_c = rng.uniform(5.0, layout.crosswalk_spacing * 0.6)
    k = 0
    while s_c < length - 5.0:
        w = layout.crosswalk_half_width
        offsets = np.linspace(-w, w, V)
        pts = np.vstack([place([s_c], d)[0] for d in offsets])
        elements.append(MapElement(f"ped-{k}", ElementClass.PED, pts, WORLD_SCALE))
        k += 1
        s_c += layout.crosswalk_spacing + rng.uniform(-5.0, 5.0)

    n = int(math.floor(length / spacing + 1e-9)) + 1
    s = np.arange(n) * spacing
    xy = place(s, 0.0)
    yaw = s / R if kind == "turning" else np.zeros_like(s)
    trajectory = [Pose2(x, y, t) for (x, y), t in zip(xy, yaw)]
    return VectorMap(tuple(elements), version=1, frame="world"), trajectory
