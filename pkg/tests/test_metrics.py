import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdmap.map_model import Pose2, VectorMap
from crowdmap.metrics import (
    REPORT_COLUMNS,
    ap_at,
    average_precision,
    change_accuracy,
    loc_stats,
    mean_ap,
    percentile,
    pose_errors,
    report_row,
    write_report_csv,
    write_report_json,
)

from conftest import line_element


def sort_interpolate(values, q):
    xs = sorted(values)
    rank = q / 100.0 * (len(xs) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (rank - lo) * (xs[hi] - xs[lo])


def ap_oracle(is_tp, n_gt):
    """Sum over each true positive of the best precision at that recall or beyond."""
    tp = fp = 0
    pr = []
    for t in is_tp:
        tp += t
        fp += not t
        pr.append((tp / n_gt, tp / (tp + fp)))
    total, prev_r = 0.0, 0.0
    for r, _ in pr:
        if r > prev_r:
            total += (r - prev_r) * max(p for rr, p in pr if rr >= r)
            prev_r = r
    return total


def shifted(vmap, dy):
    return vmap.with_elements([e.with_geometry(points=e.points + np.array([0.0, dy, 0.0])) for e in vmap])


def offset_along_normal(vmap, dist):
    """Move each straight element ``dist`` metres sideways."""
    out = []
    for e in vmap:
        d = e.xy[-1] - e.xy[0]
        n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        out.append(e.with_geometry(points=e.points + np.r_[dist * n, 0.0]))
    return vmap.with_elements(out)


class TestAP:
    def test_identical_maps(self, small_world):
        score = mean_ap(small_world, small_world)
        assert score.map_mean == 1.0
        assert all(v == 1.0 for per in score.ap_per_class_per_threshold.values() for v in per.values())

    def test_two_metre_shift(self, small_world):
        assert mean_ap(offset_along_normal(small_world, 2.0), small_world).map_mean == 0.0

    def test_threshold_boundaries(self, small_world):
        moved = shifted(small_world, 0.75)
        assert ap_at(moved, small_world, "div", 0.5) == 0.0
        assert ap_at(moved, small_world, "div", 1.0) == 1.0

    def test_known_curve(self):
        # TP, FP, TP with 3 ground truths: 1/3 * 1 + 1/3 * 2/3
        assert average_precision([0.9, 0.8, 0.7], [True, False, True], 3) == pytest.approx(1 / 3 + 2 / 9)

    @given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(0, 10))
    def test_against_oracle(self, flags, extra_gt):
        n_gt = sum(flags) + extra_gt
        if n_gt == 0:
            return
        got = average_precision(list(range(len(flags), 0, -1)), flags, n_gt)
        assert got == pytest.approx(ap_oracle(flags, n_gt), abs=1e-12)

    def test_no_predictions_and_no_gt(self):
        assert average_precision([], [], 4) == 0.0
        assert math.isnan(average_precision([], [], 0))

    def test_duplicates_count_once(self, small_world):
        extra = [e.with_geometry(id=e.id + "-dup") for e in small_world]
        doubled = small_world.with_elements(list(small_world) + extra)
        # the duplicate set sorts after the originals by id and becomes false positives
        assert mean_ap(doubled, small_world).map_mean < 1.0

    def test_confidence_order_decides(self):
        gt = VectorMap((line_element("g", "div", (0, 0), (10, 0)),))
        good = line_element("a", "div", (0, 0.1), (10, 0.1), confidence=0.5)
        bad = line_element("b", "div", (0, 5), (10, 5), confidence=0.9)
        assert ap_at(VectorMap((good, bad)), gt, "div", 0.5) == pytest.approx(0.5)
        assert ap_at(VectorMap((good, bad.with_geometry(confidence=0.1))), gt, "div", 0.5) == 1.0


class TestChangeAccuracy:
    def test_reference_arithmetic(self):
        labels = ["changed"] * 10 + ["unchanged"] * 500
        decisions = ["changed"] * 4 + ["unchanged"] * 6 + ["unchanged"] * 341 + ["changed"] * 159
        acc_c, acc_r, macc = change_accuracy(decisions, labels)
        assert round(100 * acc_c, 1) == 40.0
        assert round(100 * acc_r, 1) == 68.2
        assert round(100 * macc, 1) == 54.1

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            change_accuracy(["changed"], ["changed"])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            change_accuracy(["changed"], ["changed", "unchanged"])


class TestPoseErrors:
    def test_percentile_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            v = rng.exponential(size=rng.integers(1, 50))
            q = rng.uniform(0, 100)
            assert percentile(v, q) == pytest.approx(sort_interpolate(v, q), rel=1e-12, abs=1e-12)

    def test_heading_frame(self):
        gt = [Pose2(0, 0, math.pi / 2)]
        est = [Pose2(0.3, 2.0, math.pi / 2 + math.radians(1.0))]
        lat, lon, yaw = pose_errors(est, gt)[0]
        assert (lat, lon, yaw) == pytest.approx((0.3, 2.0, 1.0))

    def test_yaw_wraps(self):
        err = pose_errors([Pose2(0, 0, math.pi - 0.01)], [Pose2(0, 0, -math.pi + 0.01)])
        assert err[0, 2] == pytest.approx(math.degrees(0.02))

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            loc_stats([Pose2(0, 0, 0)], [])


class TestReport:
    def test_csv_header_and_nan(self, tmp_path, small_world):
        row = report_row("s", 1, mean_ap(small_world, small_world))
        write_report_csv([row], tmp_path / "m.csv")
        lines = list(csv.reader(open(tmp_path / "m.csv")))
        assert tuple(lines[0]) == REPORT_COLUMNS
        assert lines[1][:6] == ["s", "1", "1.000000", "1.000000", "1.000000", "1.000000"]
        assert lines[1][6] == "nan"

    def test_json_uses_null(self, tmp_path):
        write_report_json([report_row("s", 0, None)], tmp_path / "m.json")
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["columns"] == list(REPORT_COLUMNS)
        assert data["rows"][0]["map"] is None
