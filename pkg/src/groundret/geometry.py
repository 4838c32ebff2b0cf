"""Planar footprint geometry and the exact overlap label.

Coordinates follow the canvas raster convention: x grows with the column
index, y grows with the row index, and headings rotate (x, y) by the usual
2x2 rotation matrix.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

CLIP_EPS = 1e-12


def wrap_angle(theta):
    """Map an angle to [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    wrapped -= math.pi
    # fmod rounding can land exactly on +pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgument(f"pose component {name} is not finite")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


@dataclass(frozen=True)
class Footprint:
    corners: tuple
    width: float
    height: float

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        xs = [c[0] for c in self.corners]
        ys = [c[1] for c in self.corners]
        return (sum(xs) / 4.0, sum(ys) / 4.0)

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)


@dataclass(frozen=True)
class OverlapLabel:
    query_id: str
    ref_id: str
    overlap: float


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def footprint_from_pose(pose, width, height):
    if not (math.isfinite(width) and math.isfinite(height)) or width <= 0 or height <= 0:
        raise InvalidArgument(f"footprint dimensions must be positive, got {width}x{height}")
    if not isinstance(pose, Pose2D):
        pose = Pose2D(*pose)
    hw, hh = width / 2.0, height / 2.0
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    corners = []
    for lx, ly in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
        corners.append((c * lx - s * ly + pose.x, s * lx + c * ly + pose.y))
    return Footprint(tuple(corners), float(width), float(height))


def polygon_area(poly):
    """Signed shoelace area (positive for counter-clockwise order)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject, clip):
    """Intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        scale = math.hypot(ex, ey)

        def side(p):
            # signed distance to the clip edge, positive inside
            return (ex * (p[1] - ay) - ey * (p[0] - ax)) / scale

        inp, output = output, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= -CLIP_EPS:
                if sp < -CLIP_EPS:
                    output.append(_cross_point(prev, cur, sp, sc))
                output.append(cur)
            elif sp >= -CLIP_EPS:
                output.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return output


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def overlap_fraction(a, b):
    """Fraction of footprint ``a`` also covered by ``b``.

    Both footprints must have equal area, which makes the value symmetric.
    """
    area_a = polygon_area(a.corners)
    area_b = polygon_area(b.corners)
    if abs(area_a - area_b) > 1e-9 * max(area_a, area_b):
        raise InvalidArgument(f"footprint areas differ: {area_a} vs {area_b}")
    ca, cb = a.center, b.center
    reach = 0.5 * (a.diagonal + b.diagonal)
    if math.hypot(ca[0] - cb[0], ca[1] - cb[1]) >= reach:
        return 0.0
    inter = clip_convex(a.corners, b.corners)
    area = polygon_area(inter)
    # edge-touching or numerically empty intersections
    if len(inter) < 3 or area <= CLIP_EPS * a.diagonal:
        return 0.0
    return min(1.0, area / area_a)


def pose_error(estimate, truth):
    """Return (translation distance, absolute wrapped heading difference)."""
    dt = math.hypot(estimate.x - truth.x, estimate.y - truth.y)
    dr = abs(wrap_angle(estimate.theta - truth.theta))
    return dt, dr


def footprint_contains(fp, points):
    """Vectorised point-in-footprint test for an (n, 2) array."""
    pts = np.asarray(points, dtype=float)
    inside = np.ones(len(pts), dtype=bool)
    corners = fp.corners
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        inside &= (bx - ax) * (pts[:, 1] - ay) - (by - ay) * (pts[:, 0] - ax) >= 0.0
    return inside
