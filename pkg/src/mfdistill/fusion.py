"""Multi-view dense object fusion.

Builds one dense canonical point set per annotated object by pooling its
points across groups of consecutive frames, then caches all fused objects
for a frame in a binary file so multi-frame clouds can be assembled at
training time for the cost of one extra file read.

Pipeline per (object, target frame):
  1. split the sequence into fixed-size frame groups and compute the
     object's average per-frame in-box point count N_t per group;
  2. pool the group's canonical in-box points and keep N_t of them by
     farthest point sampling (start index seeded from object/frame/group
     so different target frames get different samples);
  3. concatenate group samples and drop the worst ~0.5% outliers;
  4. grid-subsample to at most `max_per_voxel` points per voxel.

All steps are deterministic; fusing the same inputs yields byte-identical
files regardless of worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .binio import (FormatError, Reader, pack_f32s, pack_u32, pack_u64)
from .geom import (BoundingBox3D, PointCloud, canonical_transform,
                   inverse_canonical_transform, points_in_box, wrap_angle)
from .rng import hash64


@dataclass
class FrameSequence:
    """Ordered frames plus per-frame box annotations with persistent track ids."""

    frames: list[PointCloud]
    annotations: list[list[BoundingBox3D]]

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise ValueError("frames and annotations must align")
        idx = [f.frame_index for f in self.frames]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise ValueError("frames must be ordered by unique frame_index")

    def __len__(self) -> int:
        return len(self.frames)

    def box_of(self, track_id: int, frame_pos: int) -> BoundingBox3D | None:
        for b in self.annotations[frame_pos]:
            if b.track_id == track_id:
                return b
        return None

    def track_ids(self, frame_pos: int) -> list[int]:
        return [b.track_id for b in self.annotations[frame_pos]]


@dataclass(frozen=True)
class FrameGroup:
    group_index: int
    frame_positions: tuple[int, ...]


@dataclass
class FusedObject:
    """Dense object points in canonical (box-frame) coordinates."""

    track_id: int
    box: BoundingBox3D              # pose in the target frame
    points: np.ndarray              # [N, 4] canonical xyz + intensity

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"fused points must be [N, 4], got {self.points.shape}")


@dataclass
class FusionParams:
    group_size: int = 5
    voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.15)
    max_per_voxel: int = 5
    denoise_fraction: float = 0.005
    denoise_neighbors: int = 8


def group_frames(sequence: FrameSequence, group_size: int = 5) -> list[FrameGroup]:
    """Split into floor(N / group_size) groups of consecutive frames.

    Trailing remainder frames are not grouped.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    n = len(sequence)
    m = n // group_size
    return [FrameGroup(t, tuple(range(t * group_size, (t + 1) * group_size)))
            for t in range(m)]


def avg_points_per_frame(track_id: int, group: FrameGroup,
                         sequence: FrameSequence) -> int:
    """Nearest-integer mean in-box point count over the group frames where
    the object is annotated; 0 when absent from all of them."""
    counts = []
    for pos in group.frame_positions:
        box = sequence.box_of(track_id, pos)
        if box is None:
            continue
        counts.append(len(points_in_box(sequence.frames[pos], box)))
    if not counts:
        return 0
    return int(math.floor(sum(counts) / len(counts) + 0.5))


def farthest_point_sampling(points: np.ndarray, k: int,
                            seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection of k indices starting at seed_index.

    Distances are squared Euclidean over xyz; ties resolve to the lowest
    index. k >= n returns the full greedy ordering of all points.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 0:
        raise ValueError("k must be >= 0")
    if n == 0 or k == 0:
        return np.zeros(0, dtype=np.int64)
    if not (0 <= seed_index < n):
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    k = min(k, n)
    xyz = pts[:, :3]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    d = ((xyz - xyz[seed_index]) ** 2).sum(axis=1)
    for s in range(1, k):
        nxt = int(np.argmax(d))       # argmax returns the first (lowest) index
        chosen[s] = nxt
        d = np.minimum(d, ((xyz - xyz[nxt]) ** 2).sum(axis=1))
    return chosen


def denoise(points: np.ndarray, fraction: float = 0.005,
            neighbors: int = 8) -> np.ndarray:
    """Statistical outlier removal: drop ceil(fraction * n) points with the
    largest mean distance to their k nearest neighbors.

    Clouds too small to have k neighbors pass through unchanged.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValueError("fraction must be in [0, 1)")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n <= neighbors + 1 or fraction == 0.0:
        return pts.copy()
    m = math.ceil(fraction * n)
    if m == 0:
        return pts.copy()
    tree = cKDTree(pts[:, :3])
    dist, _ = tree.query(pts[:, :3], k=neighbors + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    order = np.lexsort((np.arange(n), -mean_d))
    drop = set(order[:m].tolist())
    keep = np.array([i for i in range(n) if i not in drop], dtype=np.int64)
    return pts[keep]


def grid_subsample(points: np.ndarray,
                   voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.15),
                   max_per_voxel: int = 5) -> np.ndarray:
    """Keep at most max_per_voxel points per voxel, in input order."""
    vs = np.asarray(voxel_size, dtype=np.float64)
    if np.any(vs <= 0):
        raise ValueError("voxel_size components must be > 0")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return pts.copy()
    keys = np.floor(pts[:, :3] / vs).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    sorted_inv = inv[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sorted_inv))[0] + 1])
    group_start = np.repeat(starts, np.diff(np.concatenate([starts, [n]])))
    rank = np.arange(n) - group_start
    keep_mask = np.zeros(n, dtype=bool)
    keep_mask[order[rank < max_per_voxel]] = True
    return pts[keep_mask]


def _stable_f32(v: float) -> float:
    return float(np.float32(v))


def _quantize_box_f32(box: BoundingBox3D) -> BoundingBox3D:
    """Round box fields through f32 so file round trips are bit-exact.

    Yaw near +pi can round above pi in f32; one extra wrap fixes it.
    """
    yaw = _stable_f32(wrap_angle(box.yaw))
    if yaw > math.pi or yaw <= -math.pi:
        yaw = _stable_f32(wrap_angle(yaw))
    return BoundingBox3D(
        center=np.float32(box.center).astype(np.float64),
        size=np.float32(box.size).astype(np.float64),
        yaw=yaw,
        class_id=box.class_id,
        track_id=box.track_id,
    )


def fuse_object(track_id: int, target_frame: int, sequence: FrameSequence,
                params: FusionParams | None = None) -> FusedObject:
    """Build the dense canonical point set for one object as seen from
    `target_frame` (a position in the sequence). Raises if the object is
    not annotated there."""
    params = params or FusionParams()
    ref_box = sequence.box_of(track_id, target_frame)
    if ref_box is None:
        raise ValueError(f"track {track_id} not in frame {target_frame}")

    samples = []
    for group in group_frames(sequence, params.group_size):
        n_t = avg_points_per_frame(track_id, group, sequence)
        if n_t == 0:
            continue
        pool = []
        for pos in group.frame_positions:
            box = sequence.box_of(track_id, pos)
            if box is None:
                continue
            idx = points_in_box(sequence.frames[pos], box)
            if len(idx):
                pool.append(canonical_transform(sequence.frames[pos].points[idx], box))
        if not pool:
            continue
        pool = np.vstack(pool)
        seed = hash64(track_id, target_frame, group.group_index) % pool.shape[0]
        keep = farthest_point_sampling(pool, n_t, seed_index=int(seed))
        samples.append(pool[keep])

    if samples:
        fused = np.vstack(samples)
        fused = denoise(fused, params.denoise_fraction, params.denoise_neighbors)
        fused = grid_subsample(fused, params.voxel_size, params.max_per_voxel)
        fused = fused.astype(np.float32).astype(np.float64)
    else:
        fused = np.zeros((0, 4))
    return FusedObject(track_id=track_id, box=_quantize_box_f32(ref_box), points=fused)


def fuse_frame(sequence: FrameSequence, target_frame: int,
               params: FusionParams | None = None) -> list[FusedObject]:
    """Fuse every object annotated in the target frame, in annotation order."""
    return [fuse_object(tid, target_frame, sequence, params)
            for tid in sequence.track_ids(target_frame)]


def assemble_multiframe(frame: PointCloud, fused: list[FusedObject],
                        annotations: list[BoundingBox3D]) -> PointCloud:
    """Original frame points first (verbatim), then each fused object's
    points placed at its target-frame pose. Raises when a fused object has
    no matching annotation in this frame."""
    annotated = {b.track_id for b in annotations}
    parts = [frame.points]
    for obj in fused:
        if obj.track_id not in annotated:
            raise ValueError(f"fused track {obj.track_id} has no box in frame "
                             f"{frame.frame_index}")
        if obj.points.shape[0]:
            parts.append(inverse_canonical_transform(obj.points, obj.box))
    return PointCloud(frame.frame_index, np.vstack(parts))


# --- fused-object binary file (B_j) -------------------------------------------

FUSED_MAGIC = b"SMFB"
FUSED_VERSION = 1


def write_fused_file(objects: list[FusedObject], path):
    blob = bytearray()
    blob += FUSED_MAGIC
    blob += pack_u32(FUSED_VERSION)
    blob += pack_u32(len(objects))
    blob += pack_u32(0)                       # reserved
    for obj in objects:
        b = obj.box
        blob += pack_u64(obj.track_id)
        blob += pack_f32s([b.center[0], b.center[1], b.center[2],
                           b.size[0], b.size[1], b.size[2], b.yaw])
        blob += pack_u32(b.class_id)
        blob += pack_u32(obj.points.shape[0])
        blob += pack_f32s(obj.points.ravel())
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_fused_file(path) -> list[FusedObject]:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(FUSED_MAGIC, "fused file")
    version = r.u32("fused file version")
    if version != FUSED_VERSION:
        raise FormatError(r.offset - 4, f"unsupported fused file version {version}")
    count = r.u32("object count")
    reserved_at = r.offset
    if r.u32("reserved field") != 0:
        raise FormatError(reserved_at, "reserved field must be 0")
    objects = []
    for i in range(count):
        track_id = r.u64(f"track id of object {i}")
        box_at = r.offset
        vals = r.f32s(7, f"box of object {i}").astype(np.float64)
        class_id = r.u32(f"class id of object {i}")
        npts_at = r.offset
        npts = r.u32(f"point count of object {i}")
        if 16 * npts > r.remaining():
            raise FormatError(npts_at, f"object {i} claims {npts} points "
                                       f"({16 * npts} bytes), only {r.remaining()} left")
        pts = r.f32s(4 * npts, f"points of object {i}").astype(np.float64).reshape(npts, 4)
        try:
            box = BoundingBox3D(center=vals[:3], size=vals[3:6], yaw=vals[6],
                                class_id=class_id, track_id=track_id)
        except ValueError as e:
            raise FormatError(box_at, f"invalid box for object {i}: {e}") from None
        objects.append(FusedObject(track_id=track_id, box=box, points=pts))
    r.expect_eof("fused file")
    return objects
