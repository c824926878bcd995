"""Closed-loop multi-cycle crowdsourcing run on a simulated scenario."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from crowdmap.association import AssociationConfig, AssociationResult, associate, detect_change
from crowdmap.fusion import FrameRecord, FusionConfig, ObservationBatch, crowdsource_update, gps_covariance
from crowdmap.localizer import LocalizationError, SolveReport, SolverConfig, localize
from crowdmap.map_model import Pose2, VectorMap, crop_map, wrap_angle
from crowdmap.metrics import LocStats, MapScore, change_accuracy, loc_stats, mean_ap, report_row
from crowdmap.perception_sim import (
    ChangeSpec,
    NoiseConfig,
    RoadLayout,
    TraversalFrame,
    apply_changes,
    generate_scenario,
    stale_elements,
    synthesize_frame,
)
from crowdmap.store import MapRepository

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    kind: str = "straight"
    length: float = 160.0
    frame_spacing: float = 2.0
    cycles: int = 3
    traversals_per_cycle: int = 2
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    changes: tuple = ()
    solver: SolverConfig = field(default_factory=SolverConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    layout: RoadLayout = field(default_factory=RoadLayout)
    use_uncertainty: bool = True
    # re-association rounds after the first solve; stops early once the pose
    # moves less than refine_tol (m, and rad for yaw)
    refine_rounds: int = 10
    refine_tol: float = 1e-6
    name: str = ""

    def __post_init__(self):
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        if self.traversals_per_cycle < 1:
            raise ConfigError("traversals_per_cycle must be >= 1")
        if self.kind not in ("straight", "turning"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if not self.length > 0:
            raise ConfigError("length must be positive")
        if not self.frame_spacing > 0:
            raise ConfigError("frame_spacing must be positive")
        if self.refine_rounds < 0 or self.refine_tol < 0:
            raise ConfigError("refine_rounds and refine_tol must be non-negative")

    @property
    def scenario_name(self) -> str:
        return self.name or f"{self.kind}-s{self.seed}"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        kwargs = {}
        try:
            if "noise" in d:
                kwargs["noise"] = NoiseConfig.from_mapping(d.pop("noise"))
            if "solver" in d:
                kwargs["solver"] = SolverConfig.from_mapping(d.pop("solver"))
            if "association" in d:
                kwargs["association"] = AssociationConfig(**d.pop("association"))
            if "fusion" in d:
                kwargs["fusion"] = FusionConfig(**d.pop("fusion"))
            if "layout" in d:
                kwargs["layout"] = RoadLayout(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("layout").items()})
            if "changes" in d:
                kwargs["changes"] = tuple(ChangeSpec.from_dict(c) for c in d.pop("changes"))
            names = {f.name for f in fields(cls)}
            unknown = set(d) - names
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            kwargs.update(d)
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> RunConfig:
        """Read a JSON object, or plain ``key = value`` lines when the file is not JSON."""
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = parse_key_values(text)
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold an object")
        return cls.from_dict(data)


_NOISE_KEYS = {f.name for f in fields(NoiseConfig)}


def _kv_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [_kv_value(p.strip()) for p in raw.split(",")]
    return raw


def parse_key_values(text: str) -> dict:
    """``key = value`` lines into a nested dict.

    Dotted keys nest (``noise.sigma_lat``); bare noise field names go under
    ``noise``. Values are JSON literals or comma separated lists of them,
    anything else stays a string. ``#`` starts a comment.
    """
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected key = value")
        parts = key.split(".")
        if len(parts) == 1 and key in _NOISE_KEYS:
            parts = ["noise", key]
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {n}: {key!r} clashes with an earlier value")
        node[parts[-1]] = _kv_value(raw.strip())
    return out


@dataclass
class FrameOutcome:
    traversal: int
    index: int
    gt_pose: Pose2
    init_pose: Pose2
    est_pose: Pose2 | None
    decision: str | None = None
    label: str | None = None
    result: AssociationResult | None = None
    report: SolveReport | None = None


@dataclass
class CycleResult:
    cycle: int
    fused: VectorMap
    world: VectorMap
    score: MapScore
    frames: list
    accuracy: tuple | None
    loc: LocStats | None
    fusion_report: dict

    def row(self, scenario: str) -> dict:
        return report_row(scenario, self.cycle, self.score, self.accuracy, self.loc)


def frame_rng(seed: int, traversal: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, traversal, index])


def world_for_traversal(base: VectorMap, changes, traversal: int) -> VectorMap:
    world = base
    for spec in changes:
        if spec.effective_from <= traversal:
            world = apply_changes(world, spec)
    return world


def change_label(prior: VectorMap, world: VectorMap, gt_pose: Pose2, acfg: AssociationConfig, tol: float) -> str:
    """Ground truth: does the map differ from reality well inside the view?"""
    lon = max(acfg.range_lon - acfg.margin, 1.0)
    lat = max(acfg.range_lat - acfg.margin, 1.0)
    p = crop_map(prior, gt_pose, lon, lat, min_length=acfg.min_expected_length)
    w = crop_map(world, gt_pose, lon, lat, min_length=acfg.min_expected_length)
    if stale_elements(p, w, tol) or stale_elements(w, p, tol):
        return "changed"
    return "unchanged"


def localize_frame(obs, prior, init, cfg: RunConfig):
    """Associate and solve, then alternate re-association and solving until the pose settles.

    Correspondences of elements cut by the perception box depend on the
    pose, so a single solve only gets part of the way on curved roads.
    """
    result = associate(obs, prior, init, cfg.association)
    report = localize(result, prior, init, cfg.solver, cfg.use_uncertainty)
    for _ in range(cfg.refine_rounds):
        refined = associate(obs, prior, report.pose, cfg.association)
        try:
            nxt = localize(refined, prior, report.pose, cfg.solver, cfg.use_uncertainty)
        except LocalizationError:
            break
        d = nxt.pose.as_array() - report.pose.as_array()
        step = max(abs(d[0]), abs(d[1]), abs(wrap_angle(d[2])))
        result, report = refined, nxt
        if step < cfg.refine_tol:
            break
    return result, report


def run_cycles(cfg: RunConfig, repo: MapRepository | None = None, region: str = "default") -> list[CycleResult]:
    """Simulate ``cfg.cycles`` crowdsourcing cycles and evaluate each fused version.

    Cycle 1 bootstraps the map from GPS-level poses with no prior term;
    later cycles localize every frame against the previous version, flag
    changes and fuse. Each cycle commits one version to ``repo`` if given.
    """
    base, trajectory = generate_scenario(cfg.kind, cfg.length, np.random.default_rng([cfg.seed, 10**6]), cfg.layout, cfg.frame_spacing)
    noise = cfg.noise
    fusion_cfg = replace(cfg.fusion, use_uncertainty=cfg.use_uncertainty)
    prior = VectorMap((), version=0, frame="world")
    if repo is not None and repo.head(region) != 0:
        raise ConfigError(f"region {region!r} already has versions; use a fresh repository")
    results = []
    for cycle in range(1, cfg.cycles + 1):
        batch = ObservationBatch(traversal_id=cycle)
        outcomes: list[FrameOutcome] = []
        world = base
        for j in range(cfg.traversals_per_cycle):
            g = (cycle - 1) * cfg.traversals_per_cycle + j
            world = world_for_traversal(base, cfg.changes, g)
            history: list[AssociationResult] = []
            for f, gt in enumerate(trajectory):
                frame = synthesize_frame(
                    world, gt, noise, frame_rng(cfg.seed, g, f), prior=prior if len(prior) else None, index=f, traversal=g
                )
                outcomes.append(_process_frame(frame, prior, world, cfg, batch, history))
        new_map, report = crowdsource_update(prior, batch, fusion_cfg, with_report=True)
        if repo is not None:
            repo.commit(region, new_map)
        score = mean_ap(new_map, world)
        results.append(_summarize(cycle, new_map, world, score, outcomes, report.to_dict()))
        log.info("cycle %d: v%d, %d elements, mAP %.3f", cycle, new_map.version, len(new_map), score.map_mean)
        prior = new_map
    return results


def _process_frame(frame: TraversalFrame, prior, world, cfg: RunConfig, batch, history) -> FrameOutcome:
    noise = cfg.noise
    out = FrameOutcome(frame.traversal, frame.index, frame.gt_pose, frame.init_pose, None)
    if not len(prior):
        cov = gps_covariance(frame.init_pose, noise.sigma_lon, noise.sigma_lat, noise.sigma_yaw)
        out.est_pose = frame.init_pose
        batch.frames.append(FrameRecord(frame.obs, frame.init_pose, None, frame.traversal, frame.index, cov))
        return out
    try:
        result, report = localize_frame(frame.obs, prior, frame.init_pose, cfg)
    except LocalizationError as exc:
        log.warning("traversal %d frame %d skipped: %s", frame.traversal, frame.index, exc)
        return out
    out.est_pose = report.pose
    out.result, out.report = result, report
    out.decision = detect_change(result, history, cfg.association.window)
    history.append(result)
    out.label = change_label(prior, world, frame.gt_pose, cfg.association, noise.stale_tol)
    cov = report.covariance if cfg.use_uncertainty else None
    batch.frames.append(FrameRecord(frame.obs, report.pose, result, frame.traversal, frame.index, cov))
    return out


def _summarize(cycle, fused, world, score, outcomes, fusion_report) -> CycleResult:
    solved = [o for o in outcomes if o.est_pose is not None]
    loc = loc_stats([o.est_pose for o in solved], [o.gt_pose for o in solved]) if solved else None
    judged = [o for o in outcomes if o.decision is not None]
    acc = None
    if judged:
        try:
            acc = change_accuracy([o.decision for o in judged], [o.label for o in judged])
        except ValueError:
            acc = None
    return CycleResult(cycle, fused, world, score, outcomes, acc, loc, fusion_report)
