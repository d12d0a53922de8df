"""Geometric primitives: points, oriented 3D boxes, rigid transforms, rotated IoU.

Conventions: boxes are (center, size=(w, l, h), yaw) with yaw in (-pi, pi];
the box length l runs along the heading (local x) axis and the width w along
local y. Point arrays are float64 of shape [N, 3] or [N, 4] (x, y, z[, i]).
All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a > math.pi:
        a -= TWO_PI
    elif a <= -math.pi:
        a += TWO_PI
    return a


@dataclass(frozen=True)
class Point3:
    """One LiDAR return: position in meters plus a unitless intensity in [0, 1]."""

    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("point coordinates must be finite")
        if not (0.0 <= self.intensity <= 1.0):
            raise ValueError(f"intensity {self.intensity} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.intensity], dtype=np.float64)


@dataclass
class BoundingBox3D:
    """Oriented 3D box with class and cross-frame track identity."""

    center: np.ndarray            # (3,) meters
    size: np.ndarray              # (w, l, h) meters, all > 0
    yaw: float                    # radians, wrapped into (-pi, pi]
    class_id: int = 0
    track_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.center)):
            raise ValueError("box center must be finite")
        if not np.all(self.size > 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = wrap_angle(float(self.yaw))

    @property
    def w(self) -> float:
        return float(self.size[0])

    @property
    def l(self) -> float:
        return float(self.size[1])

    @property
    def h(self) -> float:
        return float(self.size[2])

    def bev_corners(self) -> np.ndarray:
        """Corners of the yaw-rotated BEV rectangle, CCW, shape [4, 2]."""
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])


@dataclass
class PointCloud:
    """One frame's points in sensor/world coordinates; order is stable."""

    frame_index: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"points must be [N, 4], got {self.points.shape}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")

    def __len__(self) -> int:
        return self.points.shape[0]


def _rotation2d(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def canonical_transform(points: np.ndarray, box: BoundingBox3D) -> np.ndarray:
    """Express points in the box frame: p' = R(-yaw) (p - center).

    Accepts [N, 3] or [N, 4]; extra columns (intensity) pass through.
    The transform is a rigid isometry; invert with inverse_canonical_transform.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.copy()
    out = pts.copy()
    rel = pts[:, :3] - box.center
    out[:, :2] = rel[:, :2] @ _rotation2d(-box.yaw).T
    out[:, 2] = rel[:, 2]
    return out


def inverse_canonical_transform(points: np.ndarray, box: BoundingBox3D) -> np.ndarray:
    """Map box-frame points back to world coordinates: p = R(yaw) p' + center."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.copy()
    out = pts.copy()
    out[:, :2] = pts[:, :2] @ _rotation2d(box.yaw).T
    out[:, :3] += box.center
    return out


def points_in_box(cloud: PointCloud | np.ndarray, box: BoundingBox3D,
                  margin: float = 0.0) -> np.ndarray:
    """Indices of points inside the box enlarged by `margin` on every dimension.

    A point is inside when its canonical coordinates satisfy
    |x| <= (l+margin)/2, |y| <= (w+margin)/2, |z| <= (h+margin)/2
    with boundary points counted as inside.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    canon = canonical_transform(pts[:, :3], box)
    half = 0.5 * np.array([box.l + margin, box.w + margin, box.h + margin])
    inside = np.all(np.abs(canon) <= half, axis=1)
    return np.nonzero(inside)[0].astype(np.int64)


# --- rotated IoU via convex polygon clipping ---------------------------------

def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as [N, 2] vertices (CCW positive)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex `subject` against convex CCW `clipper`.

    Points exactly on a clip edge count as inside, so shared edges survive.
    Returns the clipped polygon vertices, possibly empty.
    """
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            return np.zeros((0, 2))
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        m = len(inputs)
        for j in range(m):
            cur, nxt = inputs[j], inputs[(j + 1) % m]
            sc, sn = side(cur), side(nxt)
            if sc >= 0.0:
                output.append(cur)
                if sn < 0.0:
                    t = sc / (sc - sn)
                    output.append((cur[0] + t * (nxt[0] - cur[0]),
                                   cur[1] + t * (nxt[1] - cur[1])))
            elif sn >= 0.0:
                t = sc / (sc - sn)
                output.append((cur[0] + t * (nxt[0] - cur[0]),
                               cur[1] + t * (nxt[1] - cur[1])))
    return np.array(output) if output else np.zeros((0, 2))


def bev_intersection_area(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Area of the intersection of the two yaw-rotated BEV rectangles.

    Clip order is canonicalized so the result is bit-identical under
    argument swap (IoU symmetry holds exactly, not just to rounding).
    """
    ca, cb = a.bev_corners(), b.bev_corners()
    if tuple(cb.ravel()) < tuple(ca.ravel()):
        ca, cb = cb, ca
    inter = clip_convex(ca, cb)
    return _polygon_area(inter)


def rotated_iou_bev(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """IoU of the yaw-rotated BEV rectangles; degenerate boxes give 0."""
    area_a = a.w * a.l
    area_b = b.w * b.l
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """3D IoU: rotated BEV intersection area times z-overlap over volume union."""
    vol_a = a.volume()
    vol_b = b.volume()
    if vol_a <= 0.0 or vol_b <= 0.0:
        return 0.0
    z_lo = max(a.center[2] - 0.5 * a.h, b.center[2] - 0.5 * b.h)
    z_hi = min(a.center[2] + 0.5 * a.h, b.center[2] + 0.5 * b.h)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def box_iou(a: BoundingBox3D, b: BoundingBox3D, mode: str = "3d") -> float:
    """IoU dispatcher; `mode` is "3d" (default) or "bev"."""
    if mode == "3d":
        return iou_3d(a, b)
    if mode == "bev":
        return rotated_iou_bev(a, b)
    raise ValueError(f"unknown IoU mode {mode!r}")
