"""Cloud-side crowdsourcing of multi-traversal observations into the next map version.

Observed vertices are tracked across frames with a disjoint-set forest:
matched observations are tied to prior vertices through their index-wise
correspondences, confident new observations are tied to provisional tracks.
Every resulting cluster is fused by inverse-variance weighting against its
prior vertex (when there is one), polyline order is recovered by a vote
assignment over successor links, and the surviving chains become the
elements of the new version.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from crowdmap import polyline
from crowdmap.assignment import max_vote_assignment, min_cost_assignment
from crowdmap.association import AssociationResult, cut_ends
from crowdmap.map_model import (
    DEFAULT_RANGE_LAT,
    DEFAULT_RANGE_LON,
    V,
    ElementClass,
    LaplaceScale,
    MapElement,
    Pose2,
    VectorMap,
    chamfer_distance,
    transform_element,
)
from crowdmap.polyline import resample_fixed


@dataclass(frozen=True)
class FusionConfig:
    gate: float = 3.0
    track_gate: float = 5.0
    conf_threshold: float = 0.4
    min_new_support: int = 2
    use_uncertainty: bool = True
    range_lon: float = DEFAULT_RANGE_LON
    range_lat: float = DEFAULT_RANGE_LAT


@dataclass
class FrameRecord:
    """One frame handed to the cloud: ego observation, its pose, its association.

    ``pose_cov`` is the 3x3 (x, y, yaw) covariance of ``pose``; it is
    propagated into the member variances when uncertainty is used.
    """

    obs: VectorMap
    pose: Pose2
    result: AssociationResult | None = None
    traversal: int = 0
    index: int = 0
    pose_cov: np.ndarray | None = None


@dataclass
class ObservationBatch:
    frames: list[FrameRecord] = field(default_factory=list)
    traversal_id: int | str = 0


@dataclass
class FusedCluster:
    id: int
    cls: ElementClass
    owner: str
    member_refs: list = field(default_factory=list)
    prior_ref: tuple[str, int] | None = None
    fused_position: tuple[float, float, float] | None = None
    fused_scale: LaplaceScale | None = None
    predecessor: int | None = None
    successor: int | None = None


@dataclass
class _Track:
    id: str
    cls: ElementClass
    anchor: list  # member ref per hub index
    ref_sum: np.ndarray
    count: int = 1
    frames: set = field(default_factory=set)
    confidences: list = field(default_factory=list)

    @property
    def reference(self) -> np.ndarray:
        return self.ref_sum / self.count


@dataclass
class ClusterBuild:
    """Clusters plus the bookkeeping needed by fusion and voting."""

    clusters: list[FusedCluster]
    ref_cluster: dict
    member_info: dict  # ref -> (world position (3,), world variance (2,))
    chains: list  # per observed element: member refs in hub order
    tracks: dict


def _member_ref(frame: FrameRecord, obs_id: str, k: int) -> tuple:
    return (frame.traversal, frame.index, obs_id, k)


def member_world(frame: FrameRecord, element: MapElement, use_uncertainty: bool = True):
    """World positions ``(V, 3)`` and per-axis variances ``(V, 2)`` of an observed element."""
    pose = frame.pose
    pos = pose.apply(element.points)
    if not use_uncertainty:
        return pos, np.ones((V, 2))
    R = pose.rotation
    var = np.einsum("ij,nj,ij->ni", R, 2.0 * element.scales**2, R)
    if frame.pose_cov is not None:
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        p = element.points
        J = np.zeros((V, 2, 3))
        J[:, 0, 0] = J[:, 1, 1] = 1.0
        J[:, 0, 2] = -s * p[:, 0] - c * p[:, 1]
        J[:, 1, 2] = c * p[:, 0] - s * p[:, 1]
        var = var + np.einsum("nai,ij,naj->na", J, frame.pose_cov, J)
    return pos, var


def gps_covariance(pose: Pose2, sigma_lon: float, sigma_lat: float, sigma_yaw_deg: float) -> np.ndarray:
    """3x3 world-frame covariance of a heading-frame Gaussian pose prior."""
    R = pose.rotation
    cov = np.zeros((3, 3))
    cov[:2, :2] = R @ np.diag([sigma_lon**2, sigma_lat**2]) @ R.T
    cov[2, 2] = math.radians(sigma_yaw_deg) ** 2
    return cov


def _orient_to(reference: np.ndarray, xy: np.ndarray) -> bool:
    """True when ``xy`` runs opposite to ``reference`` (index-wise distance)."""
    fwd = np.linalg.norm(xy - reference, axis=1).mean()
    rev = np.linalg.norm(xy[::-1] - reference, axis=1).mean()
    return rev < fwd


def build_clusters(batch: ObservationBatch, prior: VectorMap, cfg: FusionConfig | None = None) -> ClusterBuild:
    """Group co-observed vertices with union-find.

    Prior vertices are the hub: an observed vertex joins the prior vertex it
    corresponds to index-wise. Confident, fully visible new observations are
    matched frame by frame against provisional tracks and join the track's
    vertices; unmatched ones start a fresh track with one cluster per vertex.
    """
    cfg = cfg or FusionConfig()
    ds = DisjointSet()
    ref_class: dict = {}
    ref_owner: dict = {}
    member_info: dict = {}
    chains: list = []
    tracks: dict[str, _Track] = {}

    for e in prior:
        refs = [("prior", e.id, k) for k in range(V)]
        for r in refs:
            ds.add(r)
            ref_class[r] = e.cls
            ref_owner[r] = e.id
        chains.append(refs)

    for frame in batch.frames:
        obs = frame.obs
        hub_of: dict[str, dict[int, int]] = defaultdict(dict)
        if frame.result is not None:
            for c in frame.result.correspondences:
                if c.prior_index is None or c.element_pair[1] not in prior:
                    continue
                o, p = c.element_pair
                ref = _member_ref(frame, o, c.obs_index)
                ds.add(ref)
                ds.merge(ref, ("prior", p, c.prior_index))
                ref_class[ref] = obs[o].cls
                ref_owner[ref] = p
                hub_of[o][c.prior_index] = c.obs_index
        for o, mapping in hub_of.items():
            pos, var = member_world(frame, obs[o], cfg.use_uncertainty)
            for k in mapping.values():
                member_info[_member_ref(frame, o, k)] = (pos[k], var[k])
            chains.append([_member_ref(frame, o, mapping[h]) for h in sorted(mapping)])

        new_ids = frame.result.new if frame.result is not None else tuple(obs.ids)
        candidates = []
        for o in new_ids:
            el = obs[o]
            if el.confidence < cfg.conf_threshold:
                continue
            if any(cut_ends(el, cfg.range_lon, cfg.range_lat)):
                continue
            candidates.append(transform_element(frame.pose, el))
        _track_frame(frame, candidates, tracks, ds, ref_class, ref_owner, member_info, chains, cfg)

    ref_cluster: dict = {}
    clusters: list[FusedCluster] = []
    subsets = sorted((sorted(s, key=repr) for s in ds.subsets()), key=lambda s: repr(s[0]))
    for refs in subsets:
        cid = len(clusters)
        prior_ref = next(((r[1], r[2]) for r in refs if r[0] == "prior"), None)
        members = [r for r in refs if r[0] != "prior"]
        first = refs[0]
        clusters.append(FusedCluster(cid, ref_class[first], ref_owner[first], members, prior_ref))
        for r in refs:
            ref_cluster[r] = cid
    return ClusterBuild(clusters, ref_cluster, member_info, chains, tracks)


def _track_frame(frame, candidates, tracks, ds, ref_class, ref_owner, member_info, chains, cfg):
    if not candidates:
        return
    track_list = sorted(tracks.values(), key=lambda t: t.id)
    cost = np.full((len(candidates), len(track_list)), np.inf)
    for i, el in enumerate(candidates):
        for j, tr in enumerate(track_list):
            if tr.cls == el.cls and frame_key(frame) not in tr.frames:
                cost[i, j] = chamfer_distance(el.xy, tr.reference)
    allowed = cost <= cfg.track_gate
    pairs = dict(min_cost_assignment(np.where(allowed, cost, 0.0), allowed))
    for i, el in enumerate(candidates):
        refs = [_member_ref(frame, el.id, k) for k in range(V)]
        pos, var = member_world(frame, frame.obs[el.id], cfg.use_uncertainty)
        for k, r in enumerate(refs):
            ds.add(r)
            ref_class[r] = el.cls
            member_info[r] = (pos[k], var[k])
        if i in pairs:
            tr = track_list[pairs[i]]
            if _orient_to(tr.reference, el.xy):
                refs = refs[::-1]
            xy = np.array([member_info[r][0][:2] for r in refs])
            for h, r in enumerate(refs):
                ds.merge(r, tr.anchor[h])
                ref_owner[r] = tr.id
            tr.ref_sum = tr.ref_sum + xy
            tr.count += 1
        else:
            tr = _Track(f"track-{len(tracks)}", el.cls, refs, el.xy.copy())
            tracks[tr.id] = tr
            for r in refs:
                ref_owner[r] = tr.id
        tr.frames.add(frame_key(frame))
        tr.confidences.append(el.confidence)
        chains.append(refs)


def frame_key(frame: FrameRecord) -> tuple[int, int]:
    return (frame.traversal, frame.index)


def fuse_vertex(members: Sequence, prior=None) -> tuple[tuple[float, float, float], LaplaceScale]:
    """Per-axis minimizer of the summed half squared Mahalanobis distances.

    ``members`` and ``prior`` are ``(position, LaplaceScale)`` pairs with the
    Laplace scale standing for a variance ``2 b**2``. The result is the
    inverse-variance weighted mean and the scale of the combined variance
    ``1 / sum(1 / var_i)``; z is the plain mean of the members.
    """
    terms = list(members) + ([prior] if prior is not None else [])
    if not terms:
        raise ValueError("cannot fuse an empty vertex")
    pos = np.array([np.asarray(p, dtype=float)[:3] if len(p) >= 3 else np.r_[p, 0.0] for p, _ in terms])
    var = np.array([s.variance for _, s in terms])
    info = 1.0 / var
    fused_var = 1.0 / info.sum(axis=0)
    xy = (info * pos[:, :2]).sum(axis=0) * fused_var
    z_src = pos[: len(members)] if members else pos
    z = float(z_src[:, 2].mean())
    return (float(xy[0]), float(xy[1]), z), LaplaceScale.from_variance(*fused_var)


def fuse_clusters(build: ClusterBuild, prior: VectorMap, use_uncertainty: bool = True, only=None) -> None:
    for cl in build.clusters:
        if only is not None and cl.id not in only:
            continue
        members = []
        for r in cl.member_refs:
            pos, var = build.member_info[r]
            members.append((pos, LaplaceScale.from_variance(*var)))
        prior_term = None
        if cl.prior_ref is not None:
            el = prior[cl.prior_ref[0]]
            k = cl.prior_ref[1]
            scale = LaplaceScale(*el.scales[k]) if use_uncertainty else LaplaceScale.from_variance(1.0, 1.0)
            prior_term = (el.points[k], scale)
        cl.fused_position, cl.fused_scale = fuse_vertex(members, prior_term)


def vote_topology(build: ClusterBuild, active=None) -> dict:
    """Set predecessor/successor links from successor votes.

    Each observed (or prior) polyline votes, in hub order, for the cluster
    holding its next vertex. A maximum-vote one-to-one assignment per
    connected component fixes the links; cycles are broken at their weakest
    link, so the result is a disjoint union of simple paths.
    """
    votes: Counter = Counter()
    for chain in build.chains:
        cids = [build.ref_cluster[r] for r in chain]
        for a, b in zip(cids, cids[1:]):
            if a != b and (active is None or (a in active and b in active)):
                votes[(a, b)] += 1
    for cl in build.clusters:
        cl.predecessor = cl.successor = None
    if not votes:
        return {}

    nodes = sorted({c for e in votes for c in e})
    index = {c: i for i, c in enumerate(nodes)}
    rows = [index[a] for a, _ in votes]
    cols = [index[b] for _, b in votes]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(graph, directed=True, connection="weak")
    groups: dict = defaultdict(list)
    for c in nodes:
        groups[labels[index[c]]].append(c)

    succ: dict = {}
    for members in groups.values():
        local = {c: i for i, c in enumerate(members)}
        M = np.zeros((len(members), len(members)))
        for (a, b), n in votes.items():
            if a in local and b in local:
                M[local[a], local[b]] = n
        for i, j in max_vote_assignment(M):
            succ[members[i]] = members[j]

    _break_cycles(succ, votes)
    for a, b in succ.items():
        build.clusters[a].successor = b
        build.clusters[b].predecessor = a
    return dict(votes)


def _break_cycles(succ: dict, votes: Counter) -> None:
    seen: set = set()
    for start in sorted(succ):
        if start in seen:
            continue
        path, node = [], start
        while node in succ and node not in seen:
            seen.add(node)
            path.append(node)
            node = succ[node]
        if node in path:
            cyc = path[path.index(node):]
            weakest = min(cyc, key=lambda a: (votes[(a, succ[a])], a))
            del succ[weakest]


@dataclass
class FusionReport:
    version: int
    n_clusters: int = 0
    n_votes: int = 0
    dropped: list = field(default_factory=list)
    admitted: list = field(default_factory=list)
    rejected_tracks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "clusters": self.n_clusters,
            "votes": self.n_votes,
            "drops": self.dropped,
            "admissions": self.admitted,
            "rejected_tracks": self.rejected_tracks,
        }


def outdated_votes(batch: ObservationBatch) -> tuple[Counter, Counter]:
    """Per prior id: frames observing it (matched or outdated) and outdated votes."""
    seen: Counter = Counter()
    out: Counter = Counter()
    for frame in batch.frames:
        r = frame.result
        if r is None:
            continue
        for p in set(r.matched_ids) | set(r.outdated):
            seen[p] += 1
        for p in set(r.outdated):
            out[p] += 1
    return seen, out


def crowdsource_update(
    prior: VectorMap,
    batch: ObservationBatch,
    cfg: FusionConfig | None = None,
    with_report: bool = False,
):
    """Fuse a batch of frames into ``prior`` and return the next version.

    Prior elements flagged outdated in at least half of the frames that
    observed them are dropped; provisional tracks need ``min_new_support``
    frames to be admitted.
    """
    cfg = cfg or FusionConfig()
    build = build_clusters(batch, prior, cfg)
    report = FusionReport(version=prior.version + 1, n_clusters=len(build.clusters))

    seen, out = outdated_votes(batch)
    dropped = sorted(p for p in prior.ids if seen[p] and out[p] >= math.ceil(seen[p] / 2))
    report.dropped = dropped
    keep_owners = set(prior.ids) - set(dropped)
    survivors = [prior[p] for p in prior.ids if p in keep_owners]

    fuse_clusters(build, prior, cfg.use_uncertainty)

    for tid, tr in sorted(build.tracks.items()):
        if len(tr.frames) < cfg.min_new_support:
            report.rejected_tracks.append(tid)
            continue
        ref = _track_geometry(build, tr)
        dup = any(
            s.cls == tr.cls and chamfer_distance(ref, s.xy) <= cfg.gate for s in survivors
        )
        if dup:
            report.rejected_tracks.append(tid)
            continue
        keep_owners.add(tid)

    active = {cl.id for cl in build.clusters if cl.owner in keep_owners}
    votes = vote_topology(build, active)
    report.n_votes = int(sum(votes.values()))

    conf = {p: (seen[p] - out[p]) / seen[p] for p in prior.ids if seen[p]}
    elements = _walk_chains(build, prior, active, conf, report)
    out_map = VectorMap(tuple(sorted(elements, key=lambda e: e.id)), version=prior.version + 1, frame="world")
    return (out_map, report) if with_report else out_map


def _track_geometry(build: ClusterBuild, tr: _Track) -> np.ndarray:
    return np.array([build.clusters[build.ref_cluster[r]].fused_position[:2] for r in tr.anchor])


def _walk_chains(build: ClusterBuild, prior: VectorMap, active: set, match_frac: dict, report: FusionReport):
    chains_by_owner: dict = defaultdict(list)
    for cl in build.clusters:
        if cl.id not in active or cl.predecessor is not None or cl.successor is None:
            continue
        chain, node = [], cl.id
        while node is not None:
            chain.append(node)
            node = build.clusters[node].successor
        if len(chain) >= 2:
            chains_by_owner[build.clusters[chain[0]].owner].append(chain)

    elements = []
    for owner, chains in chains_by_owner.items():
        chains.sort(key=lambda c: (-len(c), c[0]))
        for n, chain in enumerate(chains):
            cls = Counter(build.clusters[c].cls for c in chain).most_common(1)[0][0]
            data = np.array(
                [list(build.clusters[c].fused_position) + [build.clusters[c].fused_scale.bx, build.clusters[c].fused_scale.by] for c in chain]
            )
            if polyline.length(data) <= 0.0:
                continue
            data = resample_fixed(data, V)
            if owner in prior:
                eid = owner
                conf = match_frac.get(owner, prior[owner].confidence)
            else:
                eid = f"v{report.version}-{owner}"
                tr = build.tracks[owner]
                conf = float(np.clip(np.mean(tr.confidences), 0.0, 1.0))
                if n == 0:
                    report.admitted.append(eid)
            if n > 0:
                eid = f"{eid}.{n}"
            elements.append(MapElement(eid, cls, data[:, :3], data[:, 3:5], conf))
    return elements
