import math

import numpy as np
import pytest

from mfdistill import autodiff as ad
from mfdistill.autodiff import Tensor
from mfdistill.backbone import (
    REG_DIMS,
    DetectionHead,
    Detector,
    DetectorConfig,
    MultiScaleRPN,
    RawRPN,
    VoxelEncoder,
    build_gt_heatmap,
    build_gt_regression,
    decode_detections,
    gaussian_radius,
    scatter_to_bev,
    supervised_loss,
    voxelize,
)
from mfdistill.gradcheck import check_gradient
from mfdistill.geom import BoundingBox3D, PointCloud


def tiny_config(**kw):
    defaults = dict(
        x_range=(-1.0, 1.0), y_range=(-1.0, 1.0), z_range=(-0.5, 0.5),
        voxel_xy=0.25, voxel_z=0.25,
        feat_channels=8, rpn_widths=(4, 6, 8), bottleneck_mid=4,
        fuse_channels=6, head_channels=8, num_classes=2,
    )
    defaults.update(kw)
    return DetectorConfig(**defaults)


def mkbox(cx=0.0, cy=0.0, cz=0.0, w=0.5, l=0.8, h=0.4, yaw=0.0, class_id=0, track_id=1):
    return BoundingBox3D(center=[cx, cy, cz], size=[w, l, h], yaw=yaw,
                         class_id=class_id, track_id=track_id)


class TestVoxelize:
    def test_single_point(self):
        cfg = tiny_config()
        # center of voxel (4, 4, 2): x = -1 + 4.5*0.25 = 0.125
        cloud = PointCloud(0, np.array([[0.125, 0.125, 0.125, 0.7]]))
        grid = voxelize(cloud, cfg)
        assert len(grid) == 1
        np.testing.assert_array_equal(grid.coords, [[4, 4, 2]])
        np.testing.assert_allclose(grid.features[0, :3], 0.0, atol=1e-12)
        assert grid.features[0, 3] == pytest.approx(0.7)

    def test_two_points_averaged(self):
        cfg = tiny_config()
        cloud = PointCloud(0, np.array([[0.10, 0.125, 0.125, 0.4],
                                        [0.15, 0.125, 0.125, 0.8]]))
        grid = voxelize(cloud, cfg)
        assert len(grid) == 1
        assert grid.features[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert grid.features[0, 3] == pytest.approx(0.6)
        assert grid.features[0, 4] == pytest.approx(2 / 6)

    def test_out_of_range_dropped(self):
        cfg = tiny_config()
        cloud = PointCloud(0, np.array([[5.0, 0.0, 0.0, 0.0]]))
        assert len(voxelize(cloud, cfg)) == 0

    def test_matches_bruteforce_bucketing(self):
        cfg = tiny_config()
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-1.2, 1.2, (400, 2)),
                               rng.uniform(-0.6, 0.6, (400, 1)),
                               rng.uniform(0, 1, (400, 1))])
        grid = voxelize(PointCloud(0, pts), cfg)
        expect = {}
        for p in pts:
            if not (-1 <= p[0] < 1 and -1 <= p[1] < 1 and -0.5 <= p[2] < 0.5):
                continue
            key = (int((p[0] + 1) // 0.25), int((p[1] + 1) // 0.25),
                   int((p[2] + 0.5) // 0.25))
            expect.setdefault(key, []).append(p)
        got_keys = set(map(tuple, grid.coords.tolist()))
        assert got_keys == set(expect)
        # coords sorted lexicographically
        assert grid.coords.tolist() == sorted(grid.coords.tolist())
        for i, key in enumerate(map(tuple, grid.coords.tolist())):
            np.testing.assert_allclose(
                grid.features[i, 3], np.mean([q[3] for q in expect[key]]), atol=1e-9)

    def test_subset_property_single_vs_multi(self):
        cfg = tiny_config()
        rng = np.random.default_rng(1)
        single = rng.uniform(-0.9, 0.9, (200, 4))
        extra = rng.uniform(-0.9, 0.9, (100, 4))
        multi = np.vstack([single, extra])
        cs = set(map(tuple, voxelize(PointCloud(0, single), cfg).coords.tolist()))
        cm = set(map(tuple, voxelize(PointCloud(0, multi), cfg).coords.tolist()))
        assert cs <= cm


class TestVoxelEncoder:
    def test_isolated_voxel_neighbor_term_zero(self):
        cfg = tiny_config()
        rng = np.random.default_rng(0)
        enc = VoxelEncoder(cfg, rng)
        coords = np.array([[0, 0, 0], [5, 5, 3]])  # not adjacent
        rows, cols, inv = enc.neighbor_edges(coords)
        assert len(rows) == 0
        assert np.all(inv == 0)

    def test_adjacency(self):
        cfg = tiny_config()
        enc = VoxelEncoder(cfg, np.random.default_rng(0))
        coords = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        rows, cols, inv = enc.neighbor_edges(coords)
        assert inv[0] == pytest.approx(0.5)  # two neighbors
        assert inv[1] == pytest.approx(1.0)
        assert inv[2] == pytest.approx(1.0)

    def test_permutation_equivariance(self):
        cfg = tiny_config()
        enc = VoxelEncoder(cfg, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
        feats = rng.normal(size=(4, 5))
        from mfdistill.backbone import SparseVoxelGrid
        out = enc.forward(SparseVoxelGrid(coords, feats, cfg)).data
        perm = np.array([2, 0, 3, 1])
        out_p = enc.forward(SparseVoxelGrid(coords[perm], feats[perm], cfg)).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_gradcheck(self):
        cfg = tiny_config()
        enc = VoxelEncoder(cfg, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]])
        feats = rng.normal(size=(3, 5))
        from mfdistill.backbone import SparseVoxelGrid
        grid = SparseVoxelGrid(coords, feats, cfg)
        target = rng.normal(size=(3, cfg.feat_channels))
        res = check_gradient(
            "voxel_encoder",
            lambda: ad.mse_loss(enc.forward(grid), Tensor(target)),
            list(enc.params.values()))
        assert res.passed, res


class TestScatterToBev:
    def test_empty_grid_zero_map(self):
        cfg = tiny_config()
        out = scatter_to_bev(Tensor(np.zeros((0, 8))),
                             voxelize(PointCloud(0, np.zeros((0, 4))), cfg))
        assert out.shape == (8, 8, 8)
        assert np.all(out.data == 0)

    def test_single_voxel_single_cell(self):
        cfg = tiny_config()
        from mfdistill.backbone import SparseVoxelGrid
        grid = SparseVoxelGrid(np.array([[2, 5, 0]]), np.zeros((1, 5)), cfg)
        feats = Tensor(np.full((1, 8), 3.0))
        out = scatter_to_bev(feats, grid).data
        assert out[0, 5, 2] == 3.0
        assert np.count_nonzero(out) == 8  # one cell, all channels

    def test_z_stack_elementwise_max(self):
        cfg = tiny_config()
        from mfdistill.backbone import SparseVoxelGrid
        grid = SparseVoxelGrid(np.array([[1, 1, 0], [1, 1, 1]]),
                               np.zeros((2, 5)), cfg)
        feats = Tensor(np.array([[1.0, -2.0, 5.0], [0.5, -1.0, 7.0]]))
        out = scatter_to_bev(feats, grid).data
        np.testing.assert_array_equal(out[:, 1, 1], [1.0, -1.0, 7.0])


class TestMultiScaleRPN:
    def test_zero_input_zero_fused(self):
        rpn = MultiScaleRPN(8, (4, 6, 8), 4, 6, np.random.default_rng(0))
        fused, taps = rpn.forward(Tensor(np.zeros((8, 8, 8))))
        assert np.all(fused.data == 0)
        assert len(taps) == 4

    def test_shapes_and_weight_sum(self):
        rpn = MultiScaleRPN(8, (4, 6, 8), 4, 6, np.random.default_rng(1))
        bev = Tensor(np.random.default_rng(2).normal(size=(8, 16, 16)))
        fused, taps, weights = rpn.forward(bev, return_weights=True)
        assert fused.shape == (6, 16, 16)
        for t in taps[:3]:
            assert t.shape == (4, 16, 16)
        assert taps[3] is fused
        np.testing.assert_allclose(weights.data.sum(axis=0), 1.0, atol=1e-12)

    def test_gradcheck(self):
        rpn = MultiScaleRPN(3, (3, 4, 4), 2, 3, np.random.default_rng(3))
        bev = ad.parameter(np.random.default_rng(4).normal(size=(3, 8, 8)))
        params = [bev] + list(rpn.params.values())
        res = check_gradient(
            "ms_rpn", lambda: ad.mean(ad.mul(rpn.forward(bev)[0], rpn.forward(bev)[0])),
            params, max_coords=6, rng=np.random.default_rng(0))
        assert res.passed, res

    def test_param_ratio_paper_analog(self):
        ms = MultiScaleRPN(256, (64, 128, 256), 64, 128, np.random.default_rng(0))
        raw = RawRPN(256, (144, 288), 256, 256, np.random.default_rng(0))
        ratio = ms.param_count() / raw.param_count()
        # mirrors the reported ~2.35M vs ~4.58M parameter comparison
        assert ms.param_count() == pytest.approx(2.49e6, rel=0.02)
        assert raw.param_count() == pytest.approx(4.75e6, rel=0.02)
        assert ratio < 0.6


class TestRawRPN:
    def test_zero_input_zero_output(self):
        raw = RawRPN(4, (4, 6), 4, 4, np.random.default_rng(0))
        out = raw.forward(Tensor(np.zeros((4, 8, 8))))
        assert out.shape == (4, 8, 8)
        assert np.all(out.data == 0)

    def test_gradcheck(self):
        raw = RawRPN(2, (3, 4), 3, 3, np.random.default_rng(1))
        bev = ad.parameter(np.random.default_rng(2).normal(size=(2, 8, 8)))
        res = check_gradient(
            "raw_rpn", lambda: ad.mean(ad.mul(raw.forward(bev), raw.forward(bev))),
            [bev] + list(raw.params.values()), max_coords=5,
            rng=np.random.default_rng(1))
        assert res.passed, res


class TestDetectionHead:
    def test_output_ranges_and_shapes(self):
        head = DetectionHead(6, 8, 2, np.random.default_rng(0))
        fused = Tensor(np.random.default_rng(1).normal(size=(6, 8, 8)))
        hm, reg = head.forward(fused)
        assert hm.shape == (2, 8, 8)
        assert reg.shape == (REG_DIMS, 8, 8)
        assert np.all(hm.data > 0) and np.all(hm.data < 1)

    def test_gradcheck(self):
        head = DetectionHead(3, 4, 2, np.random.default_rng(2))
        fused = ad.parameter(np.random.default_rng(3).normal(size=(3, 6, 6)))

        def loss():
            hm, reg = head.forward(fused)
            return ad.sum_(hm) + ad.mean(ad.mul(reg, reg))

        res = check_gradient("head", loss, [fused] + list(head.params.values()),
                             max_coords=8, rng=np.random.default_rng(2))
        assert res.passed, res


class TestGtTargets:
    def test_radius_rule_reference(self):
        # direct evaluation of the three quadratic roots
        h, w, mo = 6.0, 4.0, 0.7
        r1 = ((h + w) - math.sqrt((h + w) ** 2 - 4 * (w * h * (1 - mo) / (1 + mo)))) / 2
        r2 = (2 * (h + w) - math.sqrt(4 * (h + w) ** 2 - 16 * (1 - mo) * w * h)) / 8
        b3 = -2 * mo * (h + w)
        r3 = (b3 + math.sqrt(b3 ** 2 - 16 * mo * (mo - 1) * w * h)) / (8 * mo)
        assert gaussian_radius(h, w, mo) == pytest.approx(min(r1, r2, r3))

    def test_single_object_peak(self):
        cfg = tiny_config()
        box = mkbox(cx=0.125, cy=0.125)  # center of cell (4, 4)
        hm = build_gt_heatmap([box], cfg)
        assert hm[0, 4, 4] == 1.0
        assert hm.max() == 1.0
        assert np.all((hm >= 0) & (hm <= 1))

    def test_two_distant_objects_two_peaks(self):
        cfg = tiny_config()
        hm = build_gt_heatmap([mkbox(cx=-0.7, cy=-0.7), mkbox(cx=0.7, cy=0.7)], cfg)
        assert (hm[0] == 1.0).sum() == 2

    def test_regression_targets_at_center(self):
        cfg = tiny_config()
        box = mkbox(cx=0.2, cy=-0.3, cz=0.1, yaw=0.5)
        reg, centers = build_gt_regression([box], cfg)
        assert len(centers) == 1
        cls, iy, ix = centers[0]
        assert cls == 0
        v = reg[:, iy, ix]
        assert 0 <= v[0] < 1 and 0 <= v[1] < 1
        assert v[2] == pytest.approx(0.1)
        assert v[6] == pytest.approx(math.sin(0.5))
        assert v[7] == pytest.approx(math.cos(0.5))

    def test_out_of_range_object_skipped(self):
        cfg = tiny_config()
        hm = build_gt_heatmap([mkbox(cx=9.0)], cfg)
        assert hm.max() == 0.0


class TestDecode:
    def test_empty_heatmap_no_detections(self):
        cfg = tiny_config()
        out = decode_detections(np.zeros((2, 8, 8)), np.zeros((REG_DIMS, 8, 8)), cfg)
        assert out == []

    def test_encode_decode_round_trip(self):
        cfg = tiny_config()
        box = mkbox(cx=0.2, cy=-0.3, cz=0.15, w=0.5, l=0.9, h=0.4, yaw=0.8)
        hm = build_gt_heatmap([box], cfg)
        reg, _ = build_gt_regression([box], cfg)
        out = decode_detections(hm, reg, cfg, score_threshold=0.5)
        assert len(out) == 1
        got, score = out[0]
        assert score == 1.0
        np.testing.assert_allclose(got.center, box.center, atol=cfg.voxel_xy)
        np.testing.assert_allclose(got.size, box.size, rtol=1e-6)
        assert got.yaw == pytest.approx(0.8, abs=1e-6)

    def test_scores_sorted_descending(self):
        cfg = tiny_config()
        hm = np.zeros((2, 8, 8))
        hm[0, 2, 2] = 0.9
        hm[1, 5, 5] = 0.7
        hm[0, 6, 1] = 0.95
        out = decode_detections(hm, np.zeros((REG_DIMS, 8, 8)), cfg,
                                score_threshold=0.5)
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)
        assert len(out) == 3


class TestSupervisedLoss:
    def test_perfect_prediction_near_zero(self):
        cfg = tiny_config()
        box = mkbox(cx=0.125, cy=0.125)
        gt_hm = build_gt_heatmap([box], cfg)
        gt_reg, centers = build_gt_regression([box], cfg)
        # clip keeps sigmoid-like open interval
        pred_hm = Tensor(np.clip(gt_hm, 1e-7, 1 - 1e-7))
        pred_reg = Tensor(gt_reg.copy())
        total, l_cls, l_reg = supervised_loss(pred_hm, pred_reg, gt_hm, gt_reg,
                                              centers)
        assert l_reg.item() == 0.0
        assert total.item() < 1e-4

    def test_alpha_scaling(self):
        cfg = tiny_config()
        box = mkbox(cx=0.125, cy=0.125)
        gt_hm = build_gt_heatmap([box], cfg)
        gt_reg, centers = build_gt_regression([box], cfg)
        rng = np.random.default_rng(0)
        pred_hm = Tensor(np.clip(gt_hm + rng.uniform(0, 0.05, gt_hm.shape), 1e-6, 1 - 1e-6))
        pred_reg = Tensor(gt_reg + 1.0)
        t1, l_cls, l_reg = supervised_loss(pred_hm, pred_reg, gt_hm, gt_reg,
                                           centers, alpha=2.0)
        t2, _, _ = supervised_loss(pred_hm, pred_reg, gt_hm, gt_reg,
                                   centers, alpha=4.0)
        assert t2.item() - t1.item() == pytest.approx(2.0 * l_reg.item())
        assert t1.item() == pytest.approx(l_cls.item() + 2.0 * l_reg.item())

    def test_gradcheck(self):
        cfg = tiny_config()
        box = mkbox(cx=0.125, cy=0.125)
        gt_hm = build_gt_heatmap([box], cfg)
        gt_reg, centers = build_gt_regression([box], cfg)
        rng = np.random.default_rng(1)
        logits = ad.parameter(rng.normal(size=(2, 8, 8)))
        reg = ad.parameter(rng.normal(size=(REG_DIMS, 8, 8)))

        def loss():
            return supervised_loss(ad.sigmoid(logits), reg, gt_hm, gt_reg, centers)[0]

        res = check_gradient("supervised_loss", loss, [logits, reg],
                             max_coords=16, rng=np.random.default_rng(3))
        assert res.passed, res


class TestDetectorEndToEnd:
    def test_forward_shapes(self):
        cfg = tiny_config()
        det = Detector(cfg, seed=0)
        rng = np.random.default_rng(0)
        cloud = PointCloud(0, np.column_stack([
            rng.uniform(-0.9, 0.9, (100, 2)), rng.uniform(-0.4, 0.4, (100, 1)),
            rng.uniform(0, 1, (100, 1))]))
        out = det.forward(cloud)
        assert out.heatmap.shape == (2, 8, 8)
        assert out.reg.shape == (REG_DIMS, 8, 8)
        assert out.fused.shape == (cfg.fuse_channels, 8, 8)

    def test_frozen_detector_builds_no_tape(self):
        cfg = tiny_config()
        det = Detector(cfg, seed=0)
        det.set_requires_grad(False)
        rng = np.random.default_rng(0)
        cloud = PointCloud(0, np.column_stack([
            rng.uniform(-0.9, 0.9, (50, 2)), rng.uniform(-0.4, 0.4, (50, 1)),
            rng.uniform(0, 1, (50, 1))]))
        out = det.forward(cloud)
        assert out.heatmap._edges == ()
        assert not out.heatmap.requires_grad

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = tiny_config()
        det = Detector(cfg, seed=1)
        ad.save_checkpoint(tmp_path / "d.smfw", det.named_params())
        det2 = Detector(cfg, seed=2)
        det2.load(ad.load_checkpoint(tmp_path / "d.smfw"))
        for k, v in det.named_params().items():
            np.testing.assert_array_equal(det2.named_params()[k].data, v.data)
