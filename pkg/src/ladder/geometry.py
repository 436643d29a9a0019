"""Coordinate frames, quadrilaterals and the image <-> patch transform.

Coordinates are continuous pixels with the origin at the top-left corner of
the top-left pixel; pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` and has its
center at ``(i + 0.5, j + 0.5)``. ``y`` grows downward.

Quads store their corners in the fixed order top-left, top-right,
bottom-right, bottom-left (relative to the object itself), which gives a
positive shoelace area in this y-down frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

IMAGE = "image"
PATCH = "patch"
_FRAMES = (IMAGE, PATCH)

# corner permutation that restores TL,TR,BR,BL after a left-right reflection
MIRROR_ORDER = (1, 0, 3, 2)


class GeometryError(ValueError):
    """Raised for degenerate or otherwise invalid geometric input."""


class Point2(NamedTuple):
    x: float
    y: float


def _cross(ox, oy, ax, ay, bx, by):
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


def shoelace(pts: Sequence[Sequence[float]]) -> float:
    """Signed polygon area (positive for TL,TR,BR,BL order in a y-down frame)."""
    n = len(pts)
    s = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _cross(*p3, *p4, *p1)
    d2 = _cross(*p3, *p4, *p2)
    d3 = _cross(*p1, *p2, *p3)
    d4 = _cross(*p1, *p2, *p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


@dataclass(frozen=True)
class Quad:
    corners: tuple[Point2, Point2, Point2, Point2]
    frame: str = IMAGE

    def __post_init__(self):
        if len(self.corners) != 4:
            raise GeometryError(f"quad needs 4 corners, got {len(self.corners)}")
        pts = tuple(Point2(float(x), float(y)) for x, y in self.corners)
        object.__setattr__(self, "corners", pts)
        if self.frame not in _FRAMES:
            raise GeometryError(f"unknown frame {self.frame!r}")
        if not all(math.isfinite(v) for p in pts for v in p):
            raise GeometryError("quad corners must be finite")
        if shoelace(pts) <= 0.0:
            raise GeometryError("quad has non-positive signed area (wrong order or degenerate)")
        if _segments_cross(pts[0], pts[1], pts[2], pts[3]) or _segments_cross(
            pts[1], pts[2], pts[3], pts[0]
        ):
            raise GeometryError("quad is self-intersecting")

    @classmethod
    def from_array(cls, arr, frame: str = IMAGE) -> "Quad":
        a = np.asarray(arr, dtype=float).reshape(4, 2)
        return cls(tuple(Point2(x, y) for x, y in a), frame)

    def array(self) -> np.ndarray:
        return np.array(self.corners, dtype=float)

    def flat(self) -> list[float]:
        return [v for p in self.corners for v in p]

    @property
    def area(self) -> float:
        return shoelace(self.corners)

    def is_convex(self) -> bool:
        pts = self.corners
        for i in range(4):
            if _cross(*pts[i], *pts[(i + 1) % 4], *pts[(i + 2) % 4]) < 0:
                return False
        return True

    def translated(self, dx: float, dy: float) -> "Quad":
        return Quad(tuple(Point2(p.x + dx, p.y + dy) for p in self.corners), self.frame)


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError("rect coordinates must be finite")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(f"degenerate rect {vals}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> Point2:
        return Point2(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def translated(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


@dataclass(frozen=True)
class PatchTransform:
    """Axis-aligned affine map between an image-frame crop and a square patch."""

    crop: Rect
    out_size: int = 224
    scale_x: float = field(init=False)
    scale_y: float = field(init=False)

    def __post_init__(self):
        if self.out_size < 1:
            raise GeometryError("out_size must be >= 1")
        object.__setattr__(self, "scale_x", self.out_size / self.crop.width)
        object.__setattr__(self, "scale_y", self.out_size / self.crop.height)

    def to_patch(self, p: Point2) -> Point2:
        return Point2((p[0] - self.crop.x0) * self.scale_x, (p[1] - self.crop.y0) * self.scale_y)

    def to_image(self, p: Point2) -> Point2:
        return Point2(p[0] / self.scale_x + self.crop.x0, p[1] / self.scale_y + self.crop.y0)

    def quad_to_patch(self, q: Quad) -> Quad:
        return Quad(tuple(self.to_patch(p) for p in q.corners), PATCH)

    def quad_to_image(self, q: Quad) -> Quad:
        return Quad(tuple(self.to_image(p) for p in q.corners), IMAGE)

    def points_to_image(self, pts: np.ndarray) -> np.ndarray:
        """Vectorised ``to_image`` for an ``(n, 2)`` array."""
        pts = np.asarray(pts, dtype=float)
        out = np.empty_like(pts)
        out[:, 0] = pts[:, 0] / self.scale_x + self.crop.x0
        out[:, 1] = pts[:, 1] / self.scale_y + self.crop.y0
        return out

    def points_to_patch(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.empty_like(pts)
        out[:, 0] = (pts[:, 0] - self.crop.x0) * self.scale_x
        out[:, 1] = (pts[:, 1] - self.crop.y0) * self.scale_y
        return out


def tight_rect(q: Quad) -> Rect:
    xs = [p.x for p in q.corners]
    ys = [p.y for p in q.corners]
    return Rect(min(xs), min(ys), max(xs), max(ys))


def expand_rect(r: Rect, fraction: float | Sequence[float]) -> Rect:
    """Push every side of ``r`` outward by ``fraction`` times the matching dimension.

    ``fraction`` may be a scalar or per-side ``(left, top, right, bottom)``.
    Left/right sides move by a fraction of the width, top/bottom by a fraction
    of the height.
    """
    if np.ndim(fraction) == 0:
        left = top = right = bottom = float(fraction)
    else:
        left, top, right, bottom = (float(f) for f in fraction)
    if min(left, top, right, bottom) < 0:
        raise GeometryError("expansion fraction must be >= 0")
    w, h = r.width, r.height
    return Rect(r.x0 - left * w, r.y0 - top * h, r.x1 + right * w, r.y1 + bottom * h)


def make_transform(crop: Rect, out_size: int = 224) -> PatchTransform:
    return PatchTransform(crop, int(out_size))


def to_patch(t: PatchTransform, p: Point2) -> Point2:
    return t.to_patch(p)


def to_image(t: PatchTransform, p: Point2) -> Point2:
    return t.to_image(p)


def centroid(q: Quad) -> Point2:
    return Point2(sum(p.x for p in q.corners) / 4.0, sum(p.y for p in q.corners) / 4.0)


def _on_segment(p, a, b, eps) -> bool:
    if abs(_cross(*a, *b, *p)) > eps * max(1.0, math.dist(a, b)):
        return False
    return (
        min(a[0], b[0]) - eps <= p[0] <= max(a[0], b[0]) + eps
        and min(a[1], b[1]) - eps <= p[1] <= max(a[1], b[1]) + eps
    )


def point_in_quad(p: Point2, q: Quad, eps: float = 1e-12) -> bool:
    """Inside test with the boundary counted as inside."""
    pts = q.corners
    if q.is_convex():
        return all(_cross(*pts[i], *pts[(i + 1) % 4], *p) >= -eps for i in range(4))
    # non-convex simple quad: boundary check then even-odd rule
    for i in range(4):
        if _on_segment(p, pts[i], pts[(i + 1) % 4], eps):
            return True
    inside = False
    x, y = p
    for i in range(4):
        (xa, ya), (xb, yb) = pts[i], pts[(i + 1) % 4]
        if (ya > y) != (yb > y):
            xc = xa + (y - ya) * (xb - xa) / (yb - ya)
            if xc > x:
                inside = not inside
    return inside


def clip_polygon(subject: Sequence[Sequence[float]], clip: Sequence[Sequence[float]]) -> list:
    """Sutherland-Hodgman clip of ``subject`` by the convex polygon ``clip``.

    ``clip`` must be positively oriented (shoelace area > 0).
    """
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        s = inp[-1]
        s_in = _cross(*a, *b, *s) >= 0
        for e in inp:
            e_in = _cross(*a, *b, *e) >= 0
            if e_in != s_in:
                # crossing point of segment s-e with the clip line a-b
                ds = _cross(*a, *b, *s)
                de = _cross(*a, *b, *e)
                t = ds / (ds - de)
                out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            if e_in:
                out.append(e)
            s, s_in = e, e_in
    return out


def _convex_parts(q: Quad) -> list[list[Point2]]:
    if q.is_convex():
        return [list(q.corners)]
    # a simple non-convex quad has exactly one reflex vertex; split on the
    # diagonal that starts there
    pts = q.corners
    for i in range(4):
        if _cross(*pts[i - 1], *pts[i], *pts[(i + 1) % 4]) < 0:
            j = (i + 2) % 4
            return [[pts[i], pts[(i + 1) % 4], pts[j]], [pts[j], pts[(j + 1) % 4], pts[i]]]
    raise GeometryError("could not triangulate quad")  # pragma: no cover


def intersection_area(a: Quad, b: Quad) -> float:
    total = 0.0
    for pa in _convex_parts(a):
        for pb in _convex_parts(b):
            poly = clip_polygon(pa, pb)
            if len(poly) >= 3:
                total += abs(shoelace(poly))
    return total


def quad_dice(a: Quad, b: Quad) -> float:
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        raise GeometryError("degenerate quad in dice")
    inter = intersection_area(a, b)
    return min(1.0, max(0.0, 2.0 * inter / (area_a + area_b)))


def quads_from_flat(values: Iterable[float], frame: str = PATCH) -> tuple[Quad, Quad]:
    """Split a 16-vector (x, y interleaved) into the central and upper quads."""
    v = np.asarray(list(values), dtype=float).reshape(2, 4, 2)
    return Quad.from_array(v[0], frame), Quad.from_array(v[1], frame)
