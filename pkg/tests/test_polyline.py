import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdmap import polyline

coords = st.floats(-20.0, 20.0, allow_nan=False)
segments = st.tuples(coords, coords, coords, coords)


def segment_inside_fraction(p, q, lo, hi, n=20001):
    """Dense sampling oracle for the inside part of a segment."""
    t = np.linspace(0.0, 1.0, n)
    pts = p[None] + t[:, None] * (q - p)[None]
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    if not inside.any():
        return None
    return t[inside].min(), t[inside].max()


class TestLiangBarsky:
    @settings(max_examples=200)
    @given(segments)
    def test_against_sampling_oracle(self, seg):
        p = np.array(seg[:2])
        q = np.array(seg[2:])
        lo, hi = np.array([-5.0, -3.0]), np.array([5.0, 3.0])
        got = polyline._liang_barsky(p, q, lo, hi)
        ref = segment_inside_fraction(p, q, lo, hi)
        if ref is None:
            # a hit can only be missed by sampling when the inside part is tiny
            if got is not None:
                assert (got[1] - got[0]) * np.linalg.norm(q - p) < 1e-2
            return
        assert got is not None
        tol = 2.0 / 20000
        assert got[0] == pytest.approx(ref[0], abs=tol)
        assert got[1] == pytest.approx(ref[1], abs=tol)


class TestClip:
    def test_polyline_leaving_and_reentering_gives_two_pieces(self):
        pts = np.array([[-4.0, 0.0], [0.0, 10.0], [4.0, 0.0]])
        pieces = polyline.clip_to_box(pts, [-5, -5], [5, 5])
        assert len(pieces) == 2
        for piece in pieces:
            assert np.all(np.abs(piece) <= 5 + 1e-12)

    def test_inside_polyline_untouched(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        (piece,) = polyline.clip_to_box(pts, [-5, -5], [5, 5])
        np.testing.assert_array_equal(piece, pts)

    def test_extra_columns_interpolated(self):
        pts = np.array([[0.0, 0.0, 1.0], [10.0, 0.0, 3.0]])
        (piece,) = polyline.clip_to_box(pts, [-5, -5], [5, 5])
        np.testing.assert_allclose(piece[-1], [5.0, 0.0, 2.0])


class TestProjection:
    @settings(max_examples=80)
    @given(st.lists(st.tuples(coords, coords), min_size=2, max_size=8, unique=True), st.tuples(coords, coords))
    def test_projection_is_the_closest_point(self, pts, q):
        pts = polyline.dedupe(np.array(pts))
        if len(pts) < 2:
            return
        s = polyline.project(pts, q)
        foot = polyline.interpolate(pts, np.array([s]))[0]
        dense = polyline.interpolate(pts, np.linspace(0, polyline.length(pts), 4001))
        best = np.min(np.linalg.norm(dense - np.array(q), axis=1))
        assert np.linalg.norm(foot - np.array(q)) <= best + 1e-9

    def test_many_matches_single(self, rng):
        pts = np.cumsum(rng.normal(size=(8, 2)), axis=0)
        qs = rng.normal(size=(10, 2)) * 3
        many = polyline.project_many(pts, qs)
        np.testing.assert_allclose(many, [polyline.project(pts, q) for q in qs])
        # cross-check the closest distance by dense sampling
        dense_s = np.linspace(0, polyline.length(pts), 20001)
        dense = polyline.interpolate(pts, dense_s)
        for q, s in zip(qs, many):
            foot = polyline.interpolate(pts, np.array([s]))[0]
            assert np.linalg.norm(foot - q) <= np.min(np.linalg.norm(dense - q, axis=1)) + 1e-9
