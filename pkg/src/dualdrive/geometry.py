"""Planar geometry helpers shared by the scorer and the simulator."""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np

Point = Tuple[float, float]


def rect_corners(cx: float, cy: float, heading: float, half_len: float, half_wid: float) -> np.ndarray:
    """Corners of an oriented rectangle, (4, 2), counter-clockwise."""
    c, s = math.cos(heading), math.sin(heading)
    lx, ly = half_len * c, half_len * s
    wx, wy = -half_wid * s, half_wid * c
    return np.array(
        [
            (cx + lx + wx, cy + ly + wy),
            (cx - lx + wx, cy - ly + wy),
            (cx - lx - wx, cy - ly - wy),
            (cx + lx - wx, cy + ly - wy),
        ]
    )


def rects_overlap(
    ax: float, ay: float, ah: float, ahl: float, ahw: float,
    bx: float, by: float, bh: float, bhl: float, bhw: float,
) -> bool:
    """Separating-axis overlap test for two oriented rectangles.

    For boxes only the four edge normals (two per rectangle) need checking;
    if every axis shows overlapping projections the rectangles intersect.
    Touching counts as overlap.
    """
    corners_a = rect_corners(ax, ay, ah, ahl, ahw)
    corners_b = rect_corners(bx, by, bh, bhl, bhw)
    ca, sa = math.cos(ah), math.sin(ah)
    cb, sb = math.cos(bh), math.sin(bh)
    axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
    for ux, uy in axes:
        pa = corners_a[:, 0] * ux + corners_a[:, 1] * uy
        pb = corners_b[:, 0] * ux + corners_b[:, 1] * uy
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def point_rect_distance(
    px: float, py: float, cx: float, cy: float, heading: float, half_len: float, half_wid: float
) -> float:
    """Distance from a point to an oriented rectangle; 0 inside."""
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = px - cx, py - cy
    # Rectangle-local coordinates.
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ox = max(abs(lx) - half_len, 0.0)
    oy = max(abs(ly) - half_wid, 0.0)
    return math.hypot(ox, oy)


def _orient(ax: float, ay: float, bx: float, by: float, cx: float, cy: float) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    """Whether closed segments p1p2 and q1q2 intersect (touching counts)."""
    d1 = _orient(*q1, *q2, *p1)
    d2 = _orient(*q1, *q2, *p2)
    d3 = _orient(*p1, *p2, *q1)
    d4 = _orient(*p1, *p2, *q2)
    if ((d1 > 0) != (d2 > 0) or d1 == 0 or d2 == 0) and (
        (d3 > 0) != (d4 > 0) or d3 == 0 or d4 == 0
    ):
        # Collinear/touching cases need the bounding-box check.
        if d1 == 0 and d2 == 0 and d3 == 0 and d4 == 0:
            return (
                min(p1[0], p2[0]) <= max(q1[0], q2[0])
                and min(q1[0], q2[0]) <= max(p1[0], p2[0])
                and min(p1[1], p2[1]) <= max(q1[1], q2[1])
                and min(q1[1], q2[1]) <= max(p1[1], p2[1])
            )
        return True
    return False


def segment_crosses_polyline(p1: Point, p2: Point, polyline: Sequence[Point]) -> bool:
    if len(polyline) == 1:
        return False
    for a, b in zip(polyline[:-1], polyline[1:]):
        if segments_intersect(p1, p2, a, b):
            return True
    return False


def polyline_length(points: Sequence[Point]) -> float:
    total = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        total += math.hypot(x1 - x0, y1 - y0)
    return total


def project_to_polyline(px: float, py: float, points: Sequence[Point]) -> Tuple[float, float]:
    """Project a point onto a polyline.

    Returns (arclength of the closest point, distance to it). Used for route
    progress, so ties resolve to the earliest segment.
    """
    best_s = 0.0
    best_d = math.inf
    run = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        ex, ey = x1 - x0, y1 - y0
        seg_len = math.hypot(ex, ey)
        if seg_len == 0.0:
            continue
        t = ((px - x0) * ex + (py - y0) * ey) / (seg_len * seg_len)
        t = min(max(t, 0.0), 1.0)
        qx, qy = x0 + t * ex, y0 + t * ey
        d = math.hypot(px - qx, py - qy)
        if d < best_d - 1e-12:
            best_d = d
            best_s = run + t * seg_len
        run += seg_len
    return best_s, best_d
