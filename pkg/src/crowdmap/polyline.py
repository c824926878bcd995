"""Arclength utilities for ordered polylines.

Polylines are ``(N, D)`` arrays whose first two columns are planar ``x, y``.
Any remaining columns (z, Laplace scales, ...) ride along and are linearly
interpolated wherever new points are created.
"""

from __future__ import annotations

import numpy as np


def dedupe(points: np.ndarray) -> np.ndarray:
    """Drop points whose xy coincides with the previous point."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return points
    step = np.linalg.norm(np.diff(points[:, :2], axis=0), axis=1)
    keep = np.concatenate(([True], step > 0.0))
    return points[keep]


def cumulative_length(points: np.ndarray) -> np.ndarray:
    step = np.linalg.norm(np.diff(points[:, :2], axis=0), axis=1)
    return np.concatenate(([0.0], np.cumsum(step)))


def length(points: np.ndarray) -> float:
    return float(cumulative_length(np.asarray(points, dtype=float))[-1])


def interpolate(points: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Evaluate the polyline at arclengths ``s`` (clamped to its extent)."""
    points = dedupe(points)
    cum = cumulative_length(points)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    return np.stack([np.interp(s, cum, points[:, j]) for j in range(points.shape[1])], axis=-1)


def resample_fixed(polyline, V: int = 20) -> np.ndarray:
    """Resample to ``V`` points equally spaced by arclength.

    Endpoints are reproduced exactly and extra columns (scales, z) are
    linearly interpolated along arclength.

    Raises:
        ValueError: if the polyline has zero length or ``V < 2``.
    """
    if V < 2:
        raise ValueError("V must be at least 2")
    pts = dedupe(np.asarray(polyline, dtype=float))
    if pts.ndim != 2 or pts.shape[1] < 2 or len(pts) < 2:
        raise ValueError("polyline needs at least two distinct vertices")
    cum = cumulative_length(pts)
    total = cum[-1]
    if not total > 0.0:
        raise ValueError("degenerate zero-length polyline")
    s = np.linspace(0.0, total, V)
    out = np.stack([np.interp(s, cum, pts[:, j]) for j in range(pts.shape[1])], axis=-1)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def sub_polyline(points: np.ndarray, s0: float, s1: float) -> np.ndarray:
    """Portion of the polyline between arclengths ``s0 < s1`` (clamped)."""
    pts = dedupe(np.asarray(points, dtype=float))
    cum = cumulative_length(pts)
    s0 = float(np.clip(s0, 0.0, cum[-1]))
    s1 = float(np.clip(s1, 0.0, cum[-1]))
    inner = pts[(cum > s0) & (cum < s1)]
    ends = interpolate(pts, np.array([s0, s1]))
    return dedupe(np.vstack([ends[:1], inner, ends[1:]]))


def project(points: np.ndarray, q) -> float:
    """Arclength of the point on the polyline closest to ``q`` (xy)."""
    return float(project_many(points, np.asarray(q, dtype=float)[None, :2])[0])


def project_many(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project` for an ``(M, >=2)`` array of query points."""
    pts = dedupe(np.asarray(points, dtype=float))
    q = np.asarray(queries, dtype=float)[:, :2]
    a = pts[:-1, :2]
    d = np.diff(pts[:, :2], axis=0)
    seg_len2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("mij,ij->mi", q[:, None, :] - a[None], d) / seg_len2, 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    dist2 = ((foot - q[:, None, :]) ** 2).sum(axis=-1)
    i = np.argmin(dist2, axis=1)
    cum = cumulative_length(pts)
    rows = np.arange(len(q))
    return cum[i] + t[rows, i] * np.sqrt(seg_len2[i])


def _liang_barsky(p, q, lo, hi):
    """Parameter interval ``[t0, t1]`` of segment p->q inside the box, or None."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for pk, qk in (
        (-d[0], p[0] - lo[0]),
        (d[0], hi[0] - p[0]),
        (-d[1], p[1] - lo[1]),
        (d[1], hi[1] - p[1]),
    ):
        if pk == 0.0:
            if qk < 0.0:
                return None
            continue
        r = qk / pk
        if pk < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    if t0 > t1:
        return None
    return t0, t1


def clip_to_box(points: np.ndarray, lo, hi) -> list[np.ndarray]:
    """Split a polyline into the pieces lying inside the axis-aligned box.

    Boundary crossings get interpolated vertices clamped onto the box edge.
    Pieces of zero length are discarded.
    """
    pts = dedupe(np.asarray(points, dtype=float))
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pieces: list[list[np.ndarray]] = []
    cur: list[np.ndarray] | None = None
    open_end = False
    for i in range(len(pts) - 1):
        p, q = pts[i], pts[i + 1]
        span = _liang_barsky(p[:2], q[:2], lo, hi)
        if span is None:
            cur, open_end = None, False
            continue
        t0, t1 = span
        a = p + t0 * (q - p)
        b = p + t1 * (q - p)
        a[:2] = np.clip(a[:2], lo, hi)
        b[:2] = np.clip(b[:2], lo, hi)
        if cur is not None and open_end and t0 == 0.0:
            cur.append(b)
        else:
            cur = [a, b]
            pieces.append(cur)
        open_end = t1 == 1.0
        if not open_end:
            cur = None
    out = []
    for piece in pieces:
        arr = dedupe(np.array(piece))
        if len(arr) >= 2 and length(arr) > 0.0:
            out.append(arr)
    return out
