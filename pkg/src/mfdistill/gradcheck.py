"""Central finite-difference gradient checking for every differentiable op.

Each check builds a scalar loss from the op under test, runs backward, and
compares against central differences (h = 1e-5) in float64. Inputs are drawn
away from kinks (ReLU, |.|, smooth-L1 transition), since the analytic
derivative is one-sided there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

FD_EPS = 1e-5
REL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        # a flood of nonsmooth coordinates means the check never really ran
        return self.max_rel_err < REL_TOL and self.n_skipped <= 0.25 * max(1, self.n_coords)


def fd_gradient(f: Callable[[], ad.Tensor], param: ad.Tensor,
                coords=None, eps: float = FD_EPS) -> np.ndarray:
    """Central finite differences of scalar f() wrt selected coords of param."""
    flat = param.data.ravel()
    coords = list(range(flat.size)) if coords is None else list(coords)
    out = np.zeros(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        out[k] = (hi - lo) / (2 * eps)
    return out


def fd_gradient_screened(f: Callable[[], ad.Tensor], param: ad.Tensor,
                         coords, eps: float = FD_EPS) -> np.ndarray:
    """Central differences with a two-step-size consistency screen.

    Networks full of ReLU / max / smooth-L1 branch points are only
    piecewise smooth; a perturbation that straddles a kink makes the
    finite difference meaningless for that coordinate. Estimates at eps
    and eps/3 agree at smooth points and disagree inside a kink's reach,
    so inconsistent coordinates come back as NaN and are skipped. A wrong
    analytic gradient is still caught: away from kinks both step sizes
    agree with the true local slope, not with the buggy backward pass.
    """
    d1 = fd_gradient(f, param, coords, eps)
    d2 = fd_gradient(f, param, coords, eps / 3.0)
    out = d2.copy()        # finer step: 9x less truncation error
    tol = 1e-3 * np.maximum(np.abs(d1), np.abs(d2)) + 1e-8
    out[np.abs(d1 - d2) > tol] = np.nan
    return out


def check_gradient(name: str, f: Callable[[], ad.Tensor],
                   params: list[ad.Tensor], max_coords: int = 0,
                   rng: np.random.Generator | None = None) -> CheckResult:
    """Compare backward() grads of f against finite differences.

    max_coords > 0 subsamples that many coordinates per parameter
    (used for large composites); 0 checks every coordinate.

    The per-coordinate denominator is floored at 1e-3 of the largest
    gradient component in the whole check: central differences resolve a
    loss of magnitude L only to about 1e-11 * L, so components orders of
    magnitude below the dominant gradient can only be held to absolute,
    not relative, accuracy.
    """
    for p in params:
        p.grad = None
    loss = f()
    ad.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    pairs = []
    total = 0
    skipped = 0
    for p, a in zip(params, analytic):
        n = p.data.size
        if max_coords and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        else:
            coords = list(range(n))
        fd = fd_gradient_screened(f, p, coords)
        av = a.ravel()[coords]
        good = ~np.isnan(fd)
        skipped += int((~good).sum())
        pairs.append((av[good], fd[good]))
        total += len(coords)

    scale = max((float(np.abs(v).max(initial=0.0)) for av, fd in pairs
                 for v in (av, fd)), default=0.0)
    floor = max(1e-6, 1e-3 * scale)
    worst = 0.0
    for av, fd in pairs:
        denom = np.maximum(np.maximum(np.abs(av), np.abs(fd)), floor)
        if len(av):
            worst = max(worst, float((np.abs(av - fd) / denom).max()))
    return CheckResult(name, worst, total, skipped)


def _away_from_kinks(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Nudge values off 0 so ReLU/|.|-style kinks are not straddled by FD."""
    return x + margin * np.sign(np.where(x == 0, 1.0, x))


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    """Gradient-check every primitive op at small shapes."""
    rng = np.random.default_rng(seed)
    results = []

    def t(*shape):
        return ad.parameter(_away_from_kinks(rng.normal(size=shape)))

    a, b = t(3, 4), t(3, 4)
    results.append(check_gradient("add", lambda: ad.sum_(ad.add(a, b)), [a, b]))
    results.append(check_gradient("sub", lambda: ad.sum_(ad.mul(ad.sub(a, b), ad.sub(a, b))), [a, b]))
    results.append(check_gradient("mul", lambda: ad.sum_(ad.mul(a, b)), [a, b]))
    bias = t(4)
    results.append(check_gradient("add_broadcast", lambda: ad.sum_(ad.mul(ad.add(a, bias), ad.add(a, bias))), [a, bias]))
    results.append(check_gradient("scale", lambda: ad.sum_(ad.scale(a, -2.5)), [a]))

    m1, m2 = t(3, 5), t(5, 2)
    results.append(check_gradient("matmul", lambda: ad.sum_(ad.mul(ad.matmul(m1, m2), ad.matmul(m1, m2))), [m1, m2]))
    results.append(check_gradient("transpose", lambda: ad.sum_(ad.mul(ad.transpose(m1), ad.transpose(m1))), [m1]))
    results.append(check_gradient("reshape", lambda: ad.sum_(ad.mul(ad.reshape(m1, (5, 3)), ad.reshape(m1, (5, 3)))), [m1]))

    c1, c2 = t(2, 3), t(4, 3)
    results.append(check_gradient("concat", lambda: ad.sum_(ad.mul(ad.concat([c1, c2], axis=0), ad.concat([c1, c2], axis=0))), [c1, c2]))
    s = t(4, 6)
    results.append(check_gradient("slice", lambda: ad.sum_(ad.mul(s[1:3, ::2], s[1:3, ::2])), [s]))
    results.append(check_gradient("index_rows", lambda: ad.sum_(ad.mul(ad.index_rows(s, [0, 2, 2, 3]), ad.index_rows(s, [0, 2, 2, 3]))), [s]))

    r = t(3, 4)
    results.append(check_gradient("relu", lambda: ad.sum_(ad.relu(r)), [r]))
    results.append(check_gradient("sigmoid", lambda: ad.sum_(ad.sigmoid(r)), [r]))
    results.append(check_gradient("exp", lambda: ad.sum_(ad.exp(r)), [r]))
    pos = ad.parameter(np.abs(rng.normal(size=(3, 4))) + 0.5)
    results.append(check_gradient("log", lambda: ad.sum_(ad.log(pos)), [pos]))
    results.append(check_gradient("abs", lambda: ad.sum_(ad.absolute(r)), [r]))
    results.append(check_gradient("pow_const", lambda: ad.sum_(ad.pow_const(pos, 3.0)), [pos]))
    y2, x2 = t(3, 3), t(3, 3)
    results.append(check_gradient("atan2", lambda: ad.sum_(ad.atan2(y2, x2)), [y2, x2]))

    sm = t(4, 5)
    results.append(check_gradient("softmax", lambda: ad.sum_(ad.mul(ad.softmax(sm, axis=1), ad.softmax(sm, axis=1))), [sm]))
    results.append(check_gradient("sum_axis", lambda: ad.sum_(ad.mul(ad.sum_(sm, axis=0), ad.sum_(sm, axis=0))), [sm]))
    results.append(check_gradient("mean", lambda: ad.mean(ad.mul(sm, sm)), [sm]))

    l1, l2 = t(3, 4), t(3, 4)
    results.append(check_gradient("mse_loss", lambda: ad.mse_loss(l1, l2), [l1, l2]))
    far = ad.parameter(l1.data + 3.0)
    results.append(check_gradient("smooth_l1_quad", lambda: ad.smooth_l1_loss(l1, l2, beta=10.0), [l1, l2]))
    results.append(check_gradient("smooth_l1_lin", lambda: ad.smooth_l1_loss(far, l2, beta=0.5), [far, l2]))

    x = t(3, 6, 6)
    w = t(4, 3, 3, 3)
    cb = t(4)
    results.append(check_gradient("conv2d_3x3", lambda: ad.sum_(ad.mul(ad.conv2d(x, w, cb), ad.conv2d(x, w, cb))), [x, w, cb]))
    w2 = t(4, 3, 3, 3)
    results.append(check_gradient("conv2d_stride2", lambda: ad.sum_(ad.mul(ad.conv2d(x, w2, None, stride=2), ad.conv2d(x, w2, None, stride=2))), [x, w2]))
    w1 = t(5, 3, 1, 1)
    results.append(check_gradient("conv2d_1x1", lambda: ad.sum_(ad.mul(ad.conv2d(x, w1), ad.conv2d(x, w1))), [x, w1]))

    dw = t(3, 2, 3, 3)
    db = t(2)
    results.append(check_gradient("deconv2d", lambda: ad.sum_(ad.mul(ad.deconv2d(x, dw, db), ad.deconv2d(x, dw, db))), [x, dw, db]))

    u = t(2, 3, 4)
    results.append(check_gradient("bilinear_upsample", lambda: ad.sum_(ad.mul(ad.bilinear_upsample(u, 2), ad.bilinear_upsample(u, 2))), [u]))

    nm = t(5, 3)
    rows = np.array([0, 0, 1, 2, 2, 2])
    cols = np.array([1, 2, 0, 0, 1, 4])
    inv_deg = np.array([0.5, 1.0, 1 / 3, 0.0, 0.0])
    results.append(check_gradient(
        "neighbor_mean",
        lambda: ad.sum_(ad.mul(ad.neighbor_mean(nm, rows, cols, inv_deg),
                               ad.neighbor_mean(nm, rows, cols, inv_deg))), [nm]))

    sx = t(6, 3)
    cells = np.array([0, 0, 1, 3, 3, 3])
    results.append(check_gradient(
        "scatter_max_bev",
        lambda: ad.sum_(ad.mul(ad.scatter_max_bev(sx, cells, 2, 2),
                               ad.scatter_max_bev(sx, cells, 2, 2))), [sx]))

    return results


def distill_checks(seed: int = 0) -> list[CheckResult]:
    """Gradient-check the attention encoder and all three distillation
    losses (adaptive response weights frozen at the evaluation point)."""
    from . import autodiff  # noqa: F401  (namespace clarity below)
    from .backbone import DetectorConfig
    from .distill import (AttentionEncoder, BevAdapters, adaptive_cls_loss,
                          adaptive_reg_loss, bev_distill_loss,
                          voxel_distill_loss)

    rng = np.random.default_rng(seed)
    results = []

    enc = AttentionEncoder(8, 2, np.random.default_rng(seed + 1))
    feats = ad.parameter(rng.normal(size=(4, 8)))
    centers = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 8))
    results.append(check_gradient(
        "attention_encoder",
        lambda: ad.mse_loss(enc.forward(feats, centers), ad.Tensor(target)),
        [feats] + list(enc.params.values())))

    teacher_rows = ad.Tensor(rng.normal(size=(4, 8)))
    results.append(check_gradient(
        "voxel_distill_loss",
        lambda: voxel_distill_loss(enc.forward(feats, centers), teacher_rows),
        [feats] + list(enc.params.values())))

    adapters = BevAdapters([2, 3], np.random.default_rng(seed + 2))
    s0 = ad.parameter(rng.normal(size=(2, 4, 4)))
    s1 = ad.parameter(rng.normal(size=(3, 4, 4)))
    taps_t = [ad.Tensor(rng.normal(size=(2, 4, 4))),
              ad.Tensor(rng.normal(size=(3, 4, 4)))]
    mask = (rng.uniform(size=(4, 4)) > 0.4).astype(float)
    results.append(check_gradient(
        "bev_distill_loss",
        lambda: bev_distill_loss([s0, s1], taps_t, adapters, mask),
        [s0, s1] + list(adapters.params.values())))

    h_s = ad.parameter(rng.uniform(0.1, 0.9, size=(2, 5, 5)))
    h_m = rng.uniform(0.1, 0.9, size=(2, 5, 5))
    fg = rng.uniform(size=(2, 5, 5)) > 0.5
    _, wc = adaptive_cls_loss(h_s, h_m, fg)
    results.append(check_gradient(
        "adaptive_cls_loss",
        lambda: adaptive_cls_loss(h_s, h_m, fg, frozen_weights=wc)[0], [h_s]))

    cfg = DetectorConfig(x_range=(-1, 1), y_range=(-1, 1), z_range=(-0.5, 0.5),
                         voxel_xy=0.25, voxel_z=0.25, feat_channels=8,
                         rpn_widths=(4, 6, 8), bottleneck_mid=4,
                         fuse_channels=6, head_channels=8)
    reg_centers = [(0, 2, 3), (1, 5, 5)]
    reg_m = rng.normal(scale=0.3, size=(8, cfg.ny, cfg.nx))
    reg_t = ad.parameter(reg_m + rng.uniform(0.05, 0.4, reg_m.shape))
    _, wr = adaptive_reg_loss(reg_t, reg_m, reg_centers, cfg)
    results.append(check_gradient(
        "adaptive_reg_loss",
        lambda: adaptive_reg_loss(reg_t, reg_m, reg_centers, cfg,
                                  frozen_weights=wr)[0],
        [reg_t], max_coords=24, rng=np.random.default_rng(seed)))
    return results


def composite_check(seed: int = 0, max_coords: int = 3) -> CheckResult:
    """Finite-difference check of the full training objective (supervision
    plus all distillation terms) against every student parameter tensor at
    a 32x32 BEV toy shape, with adaptive response weights frozen."""
    from .backbone import (Detector, DetectorConfig, build_gt_heatmap,
                           build_gt_regression, supervised_loss)
    from .distill import (DistillWeights, StudentAux, adaptive_cls_loss,
                          adaptive_reg_loss, distill_losses, foreground_mask,
                          total_loss)
    from .geom import BoundingBox3D, PointCloud

    cfg = DetectorConfig(x_range=(-4, 4), y_range=(-4, 4), z_range=(-0.5, 1.5),
                         voxel_xy=0.25, voxel_z=0.5, feat_channels=8,
                         rpn_widths=(4, 6, 8), bottleneck_mid=4,
                         fuse_channels=6, head_channels=8, num_classes=2)
    assert cfg.bev_shape == (32, 32)
    rng = np.random.default_rng(seed)
    single = np.column_stack([rng.uniform(-3.5, 3.5, (60, 2)),
                              rng.uniform(-0.4, 1.4, (60, 1)),
                              rng.uniform(0, 1, (60, 1))])
    extra = np.column_stack([rng.uniform(-3.5, 3.5, (40, 2)),
                             rng.uniform(-0.4, 1.4, (40, 1)),
                             rng.uniform(0, 1, (40, 1))])
    s_cloud = PointCloud(0, single)
    m_cloud = PointCloud(0, np.vstack([single, extra]))
    boxes = [BoundingBox3D(center=[1.0, 0.5, 0.5], size=[0.8, 1.4, 0.9],
                           yaw=0.4, class_id=0, track_id=1),
             BoundingBox3D(center=[-2.0, -1.5, 0.4], size=[0.5, 0.5, 0.8],
                           yaw=-1.0, class_id=1, track_id=2)]

    teacher = Detector(cfg, seed=seed + 100)
    teacher.set_requires_grad(False)
    t_out = teacher.forward(m_cloud)
    student = Detector(cfg, seed=seed + 200)
    # move the yaw (sin, cos) outputs off the atan2 origin, where the
    # curvature of the decoded-box path makes finite differences unreliable
    student.head.params["reg_b"].data[6] = 0.35
    student.head.params["reg_b"].data[7] = 0.85
    aux = StudentAux(cfg, seed=seed + 200)
    weights = DistillWeights()
    gt_hm = build_gt_heatmap(boxes, cfg)
    gt_reg, centers = build_gt_regression(boxes, cfg)

    # freeze the adaptive response weights at the starting point
    s_out0 = student.forward(s_cloud)
    fg = foreground_mask(gt_hm, weights.tau)
    _, wc = adaptive_cls_loss(s_out0.heatmap, t_out.heatmap.data, fg,
                              weights.smooth_l1_beta)
    _, wr = adaptive_reg_loss(s_out0.reg, t_out.reg.data, centers, cfg,
                              weights.smooth_l1_beta, weights.iou_mode)

    def loss():
        s_out = student.forward(s_cloud)
        _, l_cls, l_reg = supervised_loss(s_out.heatmap, s_out.reg, gt_hm,
                                          gt_reg, centers, weights.alpha)
        breakdown = distill_losses(s_out, t_out, aux, boxes, gt_hm, centers,
                                   weights, frozen_cls_weights=wc,
                                   frozen_reg_weights=wr)
        return total_loss(l_cls, l_reg, breakdown, weights)

    params = {**student.named_params(), **aux.named_params()}
    return check_gradient("composite_total_loss", loss, list(params.values()),
                          max_coords=max_coords,
                          rng=np.random.default_rng(seed + 5))


def teacher_gradient_free(seed: int = 0) -> bool:
    """True when a frozen teacher accumulates no gradient anywhere."""
    from .backbone import Detector, DetectorConfig
    from .geom import PointCloud

    cfg = DetectorConfig(x_range=(-1, 1), y_range=(-1, 1), z_range=(-0.5, 0.5),
                         voxel_xy=0.25, voxel_z=0.25, feat_channels=8,
                         rpn_widths=(4, 6, 8), bottleneck_mid=4,
                         fuse_channels=6, head_channels=8)
    rng = np.random.default_rng(seed)
    cloud = PointCloud(0, np.column_stack([rng.uniform(-0.9, 0.9, (40, 2)),
                                           rng.uniform(-0.4, 0.4, (40, 1)),
                                           rng.uniform(0, 1, (40, 1))]))
    teacher = Detector(cfg, seed=seed)
    teacher.set_requires_grad(False)
    student = Detector(cfg, seed=seed + 1)
    t_out = teacher.forward(cloud)
    s_out = student.forward(cloud)
    loss = ad.mse_loss(s_out.heatmap, ad.Tensor(t_out.heatmap.data))
    ad.backward(loss)
    return all(p.grad is None for p in teacher.named_params().values())


def full_suite(seed: int = 0) -> list[CheckResult]:
    """Primitives, attention encoder, distillation losses, and the full
    composite objective."""
    results = primitive_checks(seed)
    results.extend(distill_checks(seed))
    results.append(composite_check(seed))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        skip = f", {r.n_skipped} at kinks" if r.n_skipped else ""
        lines.append(f"  [{status}] {r.name:<22} rel_err={r.max_rel_err:.3e} "
                     f"({r.n_coords} coords{skip})")
    return "\n".join(lines)
