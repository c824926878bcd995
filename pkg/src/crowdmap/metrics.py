"""Evaluation protocol: Chamfer-gated AP/mAP, change-detection accuracy, pose error statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from crowdmap.map_model import ElementClass, Pose2, VectorMap, chamfer_matrix, stack_xy, wrap_angle

THRESHOLDS = (0.5, 1.0, 1.5)

REPORT_COLUMNS = (
    "scenario",
    "cycle",
    "ap_ped",
    "ap_div",
    "ap_bou",
    "map",
    "acc_c",
    "acc_r",
    "macc",
    "lat_mean",
    "lat_p90",
    "lon_mean",
    "lon_p90",
    "yaw_mean",
    "yaw_p90",
)


@dataclass(frozen=True)
class MapScore:
    ap_per_class_per_threshold: dict  # {class value: {threshold: AP}}
    map_mean: float

    def class_ap(self, cls: ElementClass) -> float:
        per = self.ap_per_class_per_threshold.get(cls.value)
        if not per:
            return math.nan
        return float(np.mean(list(per.values())))


@dataclass(frozen=True)
class LocStats:
    lat_mean: float
    lat_p90: float
    lon_mean: float
    lon_p90: float
    yaw_mean: float
    yaw_p90: float


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve.

    ``scores`` and ``is_tp`` must already be in descending confidence order.
    """
    if n_gt == 0:
        return math.nan
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(is_tp, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(is_tp, dtype=float))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _tp_flags(pred: VectorMap, gt: VectorMap, cls: ElementClass, threshold: float):
    preds = sorted(pred.of_class(cls), key=lambda e: (-e.confidence, e.id))
    gts = gt.of_class(cls)
    if not gts:
        return preds, [False] * len(preds), 0
    dist = chamfer_matrix(stack_xy(preds), stack_xy(gts))
    claimed = np.zeros(len(gts), dtype=bool)
    flags = []
    for i in range(len(preds)):
        d = np.where(claimed, np.inf, dist[i])
        j = int(np.argmin(d))
        if d[j] <= threshold:
            claimed[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return preds, flags, len(gts)


def ap_at(pred: VectorMap, gt: VectorMap, cls: ElementClass, threshold: float) -> float:
    """AP of one class at one Chamfer threshold (greedy claim in confidence order)."""
    preds, flags, n_gt = _tp_flags(pred, gt, ElementClass(cls), threshold)
    return average_precision([p.confidence for p in preds], flags, n_gt)


def mean_ap(pred: VectorMap, gt: VectorMap, thresholds: Sequence[float] = THRESHOLDS) -> MapScore:
    """AP averaged over thresholds per class, then over classes present in ``gt``."""
    table: dict = {}
    class_means = []
    for cls in ElementClass:
        if not gt.of_class(cls):
            continue
        per = {t: ap_at(pred, gt, cls, t) for t in thresholds}
        table[cls.value] = per
        class_means.append(float(np.mean(list(per.values()))))
    return MapScore(table, float(np.mean(class_means)) if class_means else 0.0)


def change_accuracy(decisions: Sequence[str], labels: Sequence[str]) -> tuple[float, float, float]:
    """Recall on ``changed``, recall on ``unchanged`` and their mean."""
    if len(decisions) != len(labels):
        raise ValueError("decisions and labels must have equal length")
    d = np.asarray([_as_flag(x) for x in decisions], dtype=bool)
    y = np.asarray([_as_flag(x) for x in labels], dtype=bool)
    if not y.any() or y.all():
        raise ValueError("both changed and unchanged labels are required")
    acc_c = float(np.mean(d[y]))
    acc_r = float(np.mean(~d[~y]))
    return acc_c, acc_r, (acc_c + acc_r) / 2.0


def _as_flag(x) -> bool:
    if isinstance(x, str):
        if x not in ("changed", "unchanged"):
            raise ValueError(f"unknown change label {x!r}")
        return x == "changed"
    return bool(x)


def percentile(values, q: float = 90.0) -> float:
    """Linear interpolation between closest ranks."""
    return float(np.percentile(np.asarray(values, dtype=float), q, method="linear"))


def pose_errors(est: Sequence[Pose2], gt: Sequence[Pose2]) -> np.ndarray:
    """``(N, 3)`` absolute lateral, longitudinal (m) and yaw (deg) errors in the GT heading frame."""
    if len(est) != len(gt):
        raise ValueError("estimate and ground-truth trajectories differ in length")
    if not len(gt):
        raise ValueError("empty trajectory")
    out = np.empty((len(gt), 3))
    for i, (e, g) in enumerate(zip(est, gt)):
        d = g.rotation.T @ (e.translation - g.translation)
        out[i] = (abs(d[1]), abs(d[0]), abs(math.degrees(wrap_angle(e.yaw - g.yaw))))
    return out


def loc_stats(est: Sequence[Pose2], gt: Sequence[Pose2]) -> LocStats:
    err = pose_errors(est, gt)
    return LocStats(
        lat_mean=float(err[:, 0].mean()),
        lat_p90=percentile(err[:, 0]),
        lon_mean=float(err[:, 1].mean()),
        lon_p90=percentile(err[:, 1]),
        yaw_mean=float(err[:, 2].mean()),
        yaw_p90=percentile(err[:, 2]),
    )


def report_row(scenario: str, cycle: int, score: MapScore | None, acc=None, loc: LocStats | None = None) -> dict:
    nan = math.nan
    row = {"scenario": scenario, "cycle": cycle}
    row["ap_ped"] = score.class_ap(ElementClass.PED) if score else nan
    row["ap_div"] = score.class_ap(ElementClass.DIV) if score else nan
    row["ap_bou"] = score.class_ap(ElementClass.BOU) if score else nan
    row["map"] = score.map_mean if score else nan
    acc_c, acc_r, macc = acc if acc is not None else (nan, nan, nan)
    row.update(acc_c=acc_c, acc_r=acc_r, macc=macc)
    loc_d = asdict(loc) if loc is not None else {k: nan for k in REPORT_COLUMNS[9:]}
    row.update(loc_d)
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def write_report_json(rows: Sequence[dict], path) -> None:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    summary = {"columns": list(REPORT_COLUMNS), "rows": [{c: clean(r[c]) for c in REPORT_COLUMNS} for r in rows]}
    Path(path).write_text(json.dumps(summary, indent=2))
