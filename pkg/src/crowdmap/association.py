"""Prior-map association: matched / outdated / new partition and vertex correspondences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from crowdmap import polyline
from crowdmap.assignment import min_cost_assignment
from crowdmap.map_model import (
    chamfer_matrix,
    stack_xy,
    DEFAULT_RANGE_LAT,
    DEFAULT_RANGE_LON,
    V,
    LaplaceScale,
    MapElement,
    MapVertex,
    Pose2,
    VectorMap,
    box_bounds,
    clip_element,
    crop_map,
    transform_element,
)


@dataclass(frozen=True)
class AssociationConfig:
    gate: float = 3.0
    conf_threshold: float = 0.4
    range_lon: float = DEFAULT_RANGE_LON
    range_lat: float = DEFAULT_RANGE_LAT
    # candidates are fetched from a box grown by `margin`; only elements
    # reaching `min_expected_length` into the box shrunk by `margin` may be
    # declared outdated
    margin: float = 3.0
    min_expected_length: float = 2.0
    window: int = 5
    edge_tol: float = 1e-6
    # with False, low-confidence matches are kept as matched (ablation)
    reject_changes: bool = True


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[str, str, float], ...]
    unmatched_obs: tuple[str, ...]
    unmatched_prior: tuple[str, ...]

    @property
    def total_cost(self) -> float:
        return float(sum(c for _, _, c in self.pairs))


@dataclass(frozen=True)
class Correspondence:
    """Observed vertex (ego frame) paired with a prior point (world frame).

    ``prior_index`` is the prior element's vertex index when the pair is
    index-wise (observation fully inside the perception box); partially
    visible observations are paired by arclength and carry ``None``.
    """

    obs_vertex: MapVertex
    prior_vertex: MapVertex
    element_pair: tuple[str, str]
    obs_index: int
    prior_index: int | None = None


@dataclass(frozen=True)
class AssociationResult:
    matched: tuple[tuple[str, str, float], ...]
    outdated: tuple[str, ...]
    new: tuple[str, ...]
    correspondences: tuple[Correspondence, ...] = ()
    # candidate prior elements near the box edge that were neither matched
    # nor expected to be visible
    unobserved: tuple[str, ...] = ()
    # confident new elements lying inside the prior's coverage box
    flagged_new: tuple[str, ...] = ()
    obs_confidence: dict = field(default_factory=dict)
    coverage: tuple[float, float, float, float] | None = None

    @property
    def matched_ids(self) -> list[str]:
        return [p for _, p, _ in self.matched]

    @property
    def has_change_event(self) -> bool:
        return bool(self.outdated) or bool(self.flagged_new)

    def to_dict(self) -> dict:
        return {
            "matched": [{"obs": o, "prior": p, "cost": c} for o, p, c in self.matched],
            "outdated": list(self.outdated),
            "new": list(self.new),
            "unobserved": list(self.unobserved),
            "flagged_new": list(self.flagged_new),
            "coverage": None if self.coverage is None else list(self.coverage),
            "correspondences": [
                {
                    "element_pair": list(c.element_pair),
                    "obs_index": c.obs_index,
                    "prior_index": c.prior_index,
                    "obs_vertex": list(c.obs_vertex.position),
                    "obs_scale": [c.obs_vertex.scale.bx, c.obs_vertex.scale.by],
                    "prior_vertex": list(c.prior_vertex.position),
                    "prior_scale": [c.prior_vertex.scale.bx, c.prior_vertex.scale.by],
                }
                for c in self.correspondences
            ],
        }


def hungarian_match(obs: VectorMap, prior_local: VectorMap, gate: float = 3.0) -> Assignment:
    """Minimum total Chamfer assignment between two maps in a common frame.

    Class mismatches and pairs costlier than ``gate`` are non-edges. Both
    sides are processed in id order so equal-cost ties resolve the same way
    on every run.
    """
    obs_el = sorted(obs.elements, key=lambda e: e.id)
    pri_el = sorted(prior_local.elements, key=lambda e: e.id)
    cost = chamfer_matrix(stack_xy(obs_el), stack_xy(pri_el))
    same = np.array([[a.cls == b.cls for b in pri_el] for a in obs_el], dtype=bool).reshape(cost.shape)
    cost = np.where(same, cost, np.inf)
    allowed = cost <= gate
    pairs = min_cost_assignment(np.where(allowed, cost, 0.0), allowed)
    used_o = {i for i, _ in pairs}
    used_p = {j for _, j in pairs}
    return Assignment(
        pairs=tuple(sorted((obs_el[i].id, pri_el[j].id, float(cost[i, j])) for i, j in pairs)),
        unmatched_obs=tuple(e.id for i, e in enumerate(obs_el) if i not in used_o),
        unmatched_prior=tuple(e.id for j, e in enumerate(pri_el) if j not in used_p),
    )


def cut_ends(element: MapElement, range_lon: float, range_lat: float, tol: float = 1e-6) -> tuple[bool, bool]:
    """Whether the first / last vertex sits on the perception box boundary."""

    def on_edge(p):
        return abs(p[0]) >= range_lon - tol or abs(p[1]) >= range_lat - tol

    return on_edge(element.points[0]), on_edge(element.points[-1])


def _vertex(row) -> MapVertex:
    return MapVertex((float(row[0]), float(row[1]), float(row[2])), LaplaceScale(float(row[3]), float(row[4])))


def pair_vertices(
    obs: MapElement,
    prior_world: MapElement,
    pose: Pose2,
    cut: tuple[bool, bool] = (False, False),
) -> list[Correspondence]:
    """Vertex correspondences for one matched element pair.

    A fully visible observation is paired index-wise after orienting the
    prior to the observation. When an end was cut by the perception box,
    along-track offsets measured on the prior are anchored at the uncut end
    instead; with both ends cut the vertices slide to their projections
    onto the prior under ``pose``.
    """
    prior_ego = transform_element(pose.inverse(), prior_world)
    fwd = np.linalg.norm(obs.xy - prior_ego.xy, axis=1).mean()
    rev = np.linalg.norm(obs.xy - prior_ego.xy[::-1], axis=1).mean()
    if not any(cut):
        reverse = rev < fwd
    else:
        s_first = polyline.project(prior_ego.points, obs.points[0])
        s_last = polyline.project(prior_ego.points, obs.points[-1])
        reverse = s_last < s_first if s_last != s_first else rev < fwd

    data = prior_world.stacked()
    pair = (obs.id, prior_world.id)
    if reverse:
        data = data[::-1]
    if not any(cut):
        idx = np.arange(V)[::-1] if reverse else np.arange(V)
        return [
            Correspondence(obs.vertex(k), _vertex(data[k]), pair, k, int(idx[k]))
            for k in range(V)
        ]

    # along-track offsets come from projecting onto the prior, not from the
    # noisy observation's own arclength (which lateral jitter inflates)
    ego = prior_ego.stacked()[::-1] if reverse else prior_ego.stacked()
    s_proj = polyline.project_many(ego, obs.points)
    total_prior = polyline.length(data)
    if not cut[0]:
        s = s_proj - s_proj[0]
    elif not cut[1]:
        s = total_prior - (s_proj[-1] - s_proj)
    else:
        s = s_proj
    pts = polyline.interpolate(data, s)
    return [Correspondence(obs.vertex(k), _vertex(pts[k]), pair, k, None) for k in range(V)]


def expected_ids(prior_local: VectorMap, cfg: AssociationConfig) -> set[str]:
    """Candidates reaching far enough into the shrunk box to be surely visible."""
    lo, hi = box_bounds(max(cfg.range_lon - cfg.margin, 1e-3), max(cfg.range_lat - cfg.margin, 1e-3))
    out = set()
    for e in prior_local:
        clipped = clip_element(e, lo, hi)
        if clipped is not None and clipped.length >= min(cfg.min_expected_length, e.length):
            out.add(e.id)
    return out


def _coverage(prior_local: VectorMap):
    if not len(prior_local):
        return None
    pts = np.vstack([e.xy for e in prior_local])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def _inside(points: np.ndarray, box) -> bool:
    if box is None:
        return False
    x0, y0, x1, y1 = box
    m = (points[:, 0] >= x0) & (points[:, 0] <= x1) & (points[:, 1] >= y0) & (points[:, 1] <= y1)
    return bool(m.any())


def classify_existence(
    assign: Assignment,
    obs: VectorMap,
    conf_threshold: float = 0.4,
    prior: VectorMap | None = None,
    pose: Pose2 | None = None,
    expected: set[str] | None = None,
    cfg: AssociationConfig | None = None,
    coverage=None,
) -> AssociationResult:
    """Split an assignment into matched / outdated / new and build correspondences.

    Matched pairs whose observation confidence falls below
    ``conf_threshold`` are treated as fake (outdated). Correspondences are
    built only when the world-frame ``prior`` and the ``pose`` that put it
    into the observation frame are given.
    """
    cfg = cfg or AssociationConfig(conf_threshold=conf_threshold)
    matched, outdated, unobserved = [], [], []
    for o, p, c in assign.pairs:
        if obs[o].confidence >= conf_threshold or not cfg.reject_changes:
            matched.append((o, p, c))
        else:
            outdated.append(p)
    for p in assign.unmatched_prior:
        if expected is None or p in expected:
            outdated.append(p)
        else:
            unobserved.append(p)
    new = list(assign.unmatched_obs)

    corrs: list[Correspondence] = []
    if prior is not None and pose is not None:
        for o, p, _ in matched:
            el = obs[o]
            cut = cut_ends(el, cfg.range_lon, cfg.range_lat, cfg.edge_tol)
            corrs.extend(pair_vertices(el, prior[p], pose, cut))

    flagged = tuple(
        o for o in new if obs[o].confidence >= conf_threshold and _inside(obs[o].xy, coverage)
    )
    return AssociationResult(
        matched=tuple(matched),
        outdated=tuple(sorted(outdated)),
        new=tuple(new),
        correspondences=tuple(corrs),
        unobserved=tuple(sorted(unobserved)),
        flagged_new=flagged,
        obs_confidence={e.id: e.confidence for e in obs},
        coverage=coverage,
    )


def local_prior(prior: VectorMap, pose: Pose2, cfg: AssociationConfig) -> VectorMap:
    """Prior candidates around ``pose``, clipped to the grown box, ego frame."""
    return crop_map(prior, pose, cfg.range_lon + cfg.margin, cfg.range_lat + cfg.margin)


def associate(obs: VectorMap, prior: VectorMap, pose: Pose2, cfg: AssociationConfig | None = None) -> AssociationResult:
    """Full association of an ego-frame observation against a world prior."""
    cfg = cfg or AssociationConfig()
    cand = local_prior(prior, pose, cfg)
    assign = hungarian_match(obs, cand, cfg.gate)
    return classify_existence(
        assign,
        obs,
        cfg.conf_threshold,
        prior=prior,
        pose=pose,
        expected=expected_ids(cand, cfg),
        cfg=cfg,
        coverage=_coverage(cand),
    )


def rebuild_correspondences(
    result: AssociationResult, obs: VectorMap, prior: VectorMap, pose: Pose2, cfg: AssociationConfig | None = None
) -> AssociationResult:
    """Re-anchor the correspondences of an existing partition under a new pose."""
    cfg = cfg or AssociationConfig()
    corrs: list[Correspondence] = []
    for o, p, _ in result.matched:
        el = obs[o]
        corrs.extend(pair_vertices(el, prior[p], pose, cut_ends(el, cfg.range_lon, cfg.range_lat, cfg.edge_tol)))
    return AssociationResult(
        matched=result.matched,
        outdated=result.outdated,
        new=result.new,
        correspondences=tuple(corrs),
        unobserved=result.unobserved,
        flagged_new=result.flagged_new,
        obs_confidence=result.obs_confidence,
        coverage=result.coverage,
    )


def detect_change(result: AssociationResult, history: Sequence[AssociationResult] = (), window: int = 5) -> str:
    """Temporal majority vote over the last ``window`` frames (current included).

    Outdated evidence is counted per prior element id, so independent
    one-frame misses of different elements do not add up. Frames with a
    confident new element inside the prior's coverage are counted together.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    frames = (list(history) + [result])[-window:]
    need = math.ceil(len(frames) / 2)
    per_id = Counter(p for r in frames for p in set(r.outdated))
    if per_id and max(per_id.values()) >= need:
        return "changed"
    if sum(1 for r in frames if r.flagged_new) >= need:
        return "changed"
    return "unchanged"
