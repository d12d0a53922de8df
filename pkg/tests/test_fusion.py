import math

import numpy as np
import pytest

from mfdistill.binio import FormatError
from mfdistill.fusion import (
    FrameSequence,
    FusedObject,
    FusionParams,
    assemble_multiframe,
    avg_points_per_frame,
    denoise,
    farthest_point_sampling,
    fuse_frame,
    fuse_object,
    grid_subsample,
    group_frames,
    read_fused_file,
    write_fused_file,
)
from mfdistill.geom import BoundingBox3D, PointCloud


def mkbox(cx=0.0, cy=0.0, cz=0.0, w=2.2, l=2.2, h=2.2, yaw=0.0, track_id=1, class_id=0):
    return BoundingBox3D(center=[cx, cy, cz], size=[w, l, h], yaw=yaw,
                         class_id=class_id, track_id=track_id)


def mkseq(frame_points, boxes_per_frame):
    frames = [PointCloud(i, pts) for i, pts in enumerate(frame_points)]
    return FrameSequence(frames=frames, annotations=boxes_per_frame)


def empty_frames(n):
    return [np.zeros((0, 4)) for _ in range(n)]


class TestGroupFrames:
    def test_paper_scale(self):
        seq = mkseq(empty_frames(200), [[] for _ in range(200)])
        groups = group_frames(seq)
        assert len(groups) == 40
        assert all(len(g.frame_positions) == 5 for g in groups)

    def test_too_few_frames(self):
        seq = mkseq(empty_frames(4), [[] for _ in range(4)])
        assert group_frames(seq, 5) == []

    def test_remainder_dropped(self):
        seq = mkseq(empty_frames(11), [[] for _ in range(11)])
        groups = group_frames(seq)
        assert len(groups) == 2
        covered = [p for g in groups for p in g.frame_positions]
        assert covered == list(range(10))

    def test_empty_sequence(self):
        seq = mkseq([], [])
        assert group_frames(seq) == []


class TestAvgPoints:
    def _seq_with_counts(self, counts):
        """Object present (annotated) in frames where count is not None."""
        frames, annos = [], []
        for c in counts:
            if c is None:
                frames.append(np.zeros((0, 4)))
                annos.append([])
            else:
                pts = np.zeros((c, 4))
                pts[:, 0] = np.linspace(-0.5, 0.5, max(c, 1))[:c]
                frames.append(pts)
                annos.append([mkbox()])
        return mkseq(frames, annos)

    def test_constant(self):
        seq = self._seq_with_counts([10] * 5)
        g = group_frames(seq)[0]
        assert avg_points_per_frame(1, g, seq) == 10

    def test_mean_over_appearing_frames(self):
        seq = self._seq_with_counts([8, 4, None, None, None])
        g = group_frames(seq)[0]
        assert avg_points_per_frame(1, g, seq) == 6

    def test_absent(self):
        seq = self._seq_with_counts([None] * 5)
        g = group_frames(seq)[0]
        assert avg_points_per_frame(1, g, seq) == 0


def fps_oracle(points, k, seed_index):
    """Exhaustive greedy max-min with explicit lowest-index tie breaking."""
    n = len(points)
    k = min(k, n)
    chosen = [seed_index]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(((points[i, :3] - points[j, :3]) ** 2).sum() for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


class TestFPS:
    def test_k1_returns_seed(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert farthest_point_sampling(pts, 1, seed_index=4).tolist() == [4]

    def test_k_equals_n(self):
        pts = np.random.default_rng(1).normal(size=(8, 3))
        got = farthest_point_sampling(pts, 8)
        assert sorted(got.tolist()) == list(range(8))

    def test_k_above_n_returns_all(self):
        pts = np.random.default_rng(1).normal(size=(6, 3))
        assert sorted(farthest_point_sampling(pts, 100).tolist()) == list(range(6))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            pts = rng.normal(size=(16, 3))
            seed = int(rng.integers(16))
            got = farthest_point_sampling(pts, 3, seed_index=seed).tolist()
            assert got == fps_oracle(pts, 3, seed)

    def test_maxmin_invariant(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(40, 3))
        sel = farthest_point_sampling(pts, 15).tolist()
        for s in range(1, 15):
            prev = sel[:s]
            chosen_d = min(((pts[sel[s]] - pts[j]) ** 2).sum() for j in prev)
            for i in range(40):
                if i in prev or i == sel[s]:
                    continue
                d = min(((pts[i] - pts[j]) ** 2).sum() for j in prev)
                assert chosen_d >= d - 1e-12


class TestDenoise:
    def test_removes_half_percent(self):
        pts = np.random.default_rng(0).normal(size=(1000, 4))
        assert denoise(pts).shape[0] == 995

    def test_tiny_cloud_unchanged(self):
        pts = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(denoise(pts), pts)

    def test_planted_outliers_removed(self):
        rng = np.random.default_rng(3)
        cluster = rng.normal(scale=0.1, size=(200, 4))
        outliers = rng.normal(loc=50.0, scale=0.1, size=(5, 4))
        outliers[:, 0] += np.arange(5) * 30  # spread them apart
        pts = np.vstack([cluster, outliers])
        out = denoise(pts, fraction=5 / 205)
        assert out.shape[0] == 200
        assert np.all(np.abs(out[:, :3]) < 5)


class TestGridSubsample:
    def test_coincident_capped_at_five(self):
        pts = np.tile(np.array([[0.03, 0.03, 0.03, 0.5]]), (7, 1))
        assert grid_subsample(pts).shape[0] == 5

    def test_distinct_voxels_unchanged(self):
        pts = np.array([[i * 1.0, 0, 0, 0] for i in range(10)])
        np.testing.assert_array_equal(grid_subsample(pts), pts)

    def test_matches_bruteforce_bucketing(self):
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(-1, 1, (500, 3)), rng.uniform(0, 1, 500)])
        vs = (0.1, 0.1, 0.15)
        got = grid_subsample(pts, vs, 3)
        seen = {}
        keep = []
        for i, p in enumerate(pts):
            key = tuple(int(math.floor(p[d] / vs[d])) for d in range(3))
            seen[key] = seen.get(key, 0) + 1
            if seen[key] <= 3:
                keep.append(i)
        np.testing.assert_array_equal(got, pts[keep])

    def test_idempotent(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(scale=0.2, size=(300, 4))
        once = grid_subsample(pts)
        twice = grid_subsample(once)
        np.testing.assert_array_equal(once, twice)


def sphere_points(rng, n, keep):
    """Random points on the unit sphere filtered by `keep(xyz)`."""
    out = []
    while len(out) < n:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if keep(v):
            out.append([v[0], v[1], v[2], 0.5])
    return np.array(out)


def surface_bins(points, n_az=12, n_el=4):
    az = np.arctan2(points[:, 1], points[:, 0])
    el = np.arcsin(np.clip(points[:, 2] / np.linalg.norm(points[:, :3], axis=1), -1, 1))
    ia = np.clip(((az + math.pi) / (2 * math.pi) * n_az).astype(int), 0, n_az - 1)
    ie = np.clip(((el + math.pi / 2) / math.pi * n_el).astype(int), 0, n_el - 1)
    return set(zip(ia.tolist(), ie.tolist()))


class TestFuseObject:
    def _hemisphere_seq(self):
        rng = np.random.default_rng(11)
        frames, annos = [], []
        for i in range(10):
            if i < 5:
                pts = sphere_points(rng, 150, lambda v: v[0] > 0.05)
            else:
                pts = sphere_points(rng, 150, lambda v: v[0] < -0.05)
            frames.append(pts)
            annos.append([mkbox()])
        return mkseq(frames, annos)

    def test_absent_track_raises(self):
        seq = mkseq([np.zeros((1, 4))], [[]])
        with pytest.raises(ValueError, match="not in frame"):
            fuse_object(1, 0, seq)

    def test_single_frame_degenerate(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, size=(60, 4))
        pts[:, 3] = np.abs(pts[:, 3])
        seq = mkseq([pts] + empty_frames(4), [[mkbox()]] + [[] for _ in range(4)])
        out = fuse_object(1, 0, seq, FusionParams(denoise_fraction=0.0))
        # one group, object in 1 of 5 frames: N_t = 60, pool is that frame
        assert out.points.shape[0] <= 60
        assert out.points.shape[0] >= 55

    def test_two_view_coverage(self):
        seq = self._hemisphere_seq()
        fused = fuse_object(1, 0, seq)
        total_bins = 12 * 4
        fused_cov = len(surface_bins(fused.points)) / total_bins
        single_cov = max(
            len(surface_bins(seq.frames[0].points)) / total_bins,
            len(surface_bins(seq.frames[9].points)) / total_bins,
        )
        assert fused_cov >= 0.90
        assert single_cov <= 0.55

    def test_sum_nt_accounting(self):
        # 10 frames, 2 groups; constant 20 points per frame, spread out so
        # grid subsampling keeps everything and denoise is disabled.
        rng = np.random.default_rng(4)
        base = rng.uniform(-1, 1, size=(20, 4)) * np.array([1, 1, 1, 0])
        frames = [base.copy() for _ in range(10)]
        annos = [[mkbox()] for _ in range(10)]
        seq = mkseq(frames, annos)
        groups = group_frames(seq)
        nts = [avg_points_per_frame(1, g, seq) for g in groups]
        assert nts == [20, 20]
        out = fuse_object(1, 0, seq, FusionParams(denoise_fraction=0.0,
                                                  voxel_size=(0.01, 0.01, 0.01)))
        assert out.points.shape[0] == sum(nts)

    def test_upper_bound_sum_nt(self):
        seq = self._hemisphere_seq()
        groups = group_frames(seq)
        total = sum(avg_points_per_frame(1, g, seq) for g in groups)
        fused = fuse_object(1, 0, seq)
        assert fused.points.shape[0] <= total

    def test_different_frames_get_different_samples(self):
        seq = self._hemisphere_seq()
        a = fuse_object(1, 0, seq)
        b = fuse_object(1, 3, seq)
        assert a.points.shape != b.points.shape or not np.array_equal(a.points, b.points)


class TestFusedFile:
    def _objects(self):
        rng = np.random.default_rng(8)
        objs = []
        for i in range(3):
            pts = rng.normal(size=(10 + i, 4)).astype(np.float32).astype(np.float64)
            objs.append(FusedObject(track_id=100 + i,
                                    box=mkbox(cx=float(i), track_id=100 + i, class_id=i),
                                    points=pts))
        return objs

    def test_round_trip(self, tmp_path):
        objs = self._objects()
        path = tmp_path / "b.smfb"
        write_fused_file(objs, path)
        back = read_fused_file(path)
        assert len(back) == 3
        for a, b in zip(objs, back):
            assert a.track_id == b.track_id
            assert a.box.class_id == b.box.class_id
            np.testing.assert_array_equal(a.points, b.points)
        # byte-stable: write(read(x)) == x
        path2 = tmp_path / "b2.smfb"
        write_fused_file(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_file_is_16_byte_header(self, tmp_path):
        path = tmp_path / "empty.smfb"
        write_fused_file([], path)
        assert path.stat().st_size == 16
        assert read_fused_file(path) == []

    def test_corrupted_point_count(self, tmp_path):
        path = tmp_path / "b.smfb"
        write_fused_file(self._objects(), path)
        blob = bytearray(path.read_bytes())
        # point_count of object 0 sits after header(16) + track(8) + box(28) + class(4)
        off = 16 + 8 + 28 + 4
        blob[off:off + 4] = (10 ** 6).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as e:
            read_fused_file(path)
        assert e.value.offset == off

    def test_truncation_fuzz(self, tmp_path):
        path = tmp_path / "b.smfb"
        write_fused_file(self._objects(), path)
        blob = path.read_bytes()
        for cut in range(len(blob)):
            t = tmp_path / "t.smfb"
            t.write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                read_fused_file(t)


class TestAssemble:
    def test_empty_fused_is_identity(self):
        frame = PointCloud(0, np.random.default_rng(0).random((50, 4)))
        out = assemble_multiframe(frame, [], [mkbox()])
        np.testing.assert_array_equal(out.points, frame.points)

    def test_prefix_contract(self):
        rng = np.random.default_rng(1)
        frame = PointCloud(3, rng.random((1000, 4)))
        fused_pts = rng.random((100, 4)).astype(np.float32).astype(np.float64)
        obj = FusedObject(track_id=1, box=mkbox(cx=5.0), points=fused_pts)
        out = assemble_multiframe(frame, [obj], [mkbox(cx=5.0)])
        assert len(out) == 1100
        np.testing.assert_array_equal(out.points[:1000], frame.points)

    def test_missing_annotation_raises(self):
        frame = PointCloud(0, np.zeros((1, 4)))
        obj = FusedObject(track_id=7, box=mkbox(track_id=7), points=np.zeros((1, 4)))
        with pytest.raises(ValueError, match="no box"):
            assemble_multiframe(frame, [obj], [mkbox(track_id=8)])

    def test_voxel_subset_property(self):
        rng = np.random.default_rng(2)
        frame = PointCloud(0, rng.uniform(-4, 4, size=(500, 4)))
        obj = FusedObject(track_id=1, box=mkbox(cx=1.0),
                          points=rng.uniform(-1, 1, (80, 4)).astype(np.float32).astype(np.float64))
        out = assemble_multiframe(frame, [obj], [mkbox(cx=1.0)])

        def vox(cloud):
            return set(map(tuple, np.floor(cloud.points[:, :3] / 0.25).astype(int).tolist()))

        assert vox(frame) <= vox(out)


def test_fuse_frame_order_follows_annotations():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, size=(400, 4))
    boxes = [mkbox(cx=-2.0, track_id=5), mkbox(cx=2.0, track_id=3)]
    seq = mkseq([pts] * 5, [boxes] * 5)
    objs = fuse_frame(seq, 0)
    assert [o.track_id for o in objs] == [5, 3]
