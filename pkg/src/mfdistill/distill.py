"""Distillation losses connecting a frozen multi-frame teacher to a
trainable single-frame student.

Three transfer paths:
  * voxel: student voxels inside (margin-enlarged) GT boxes are re-encoded
    with relative-position self attention, then matched by integer voxel
    coordinates to teacher voxels and pulled together with MSE;
  * BEV: four RPN taps (three bottleneck middles + the fused map) are
    compared on foreground cells after a learned 1x1 conv + ReLU adapter;
  * response: heatmap and regression maps are matched with smooth-L1 on
    foreground positions, reweighted by student confidence (classification)
    or student/teacher box IoU (regression) under a sum-preserving scheme.

The adaptive weights are data-dependent constants: they modulate the loss
but do not themselves carry gradient (a weight that stayed on the tape
would cancel out exactly, since the normalization keeps sum(w * L) equal
to sum(L) identically).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Detector, DetectorConfig, DetectorOutput, Module, _he
from .geom import BoundingBox3D, box_iou, wrap_angle

log = logging.getLogger(__name__)


@dataclass
class DistillWeights:
    tau: float = 0.1          # foreground threshold on the GT heatmap
    pi1: float = 2.0          # classification response weight
    pi2: float = 1.0          # regression response weight
    alpha: float = 2.0        # supervised regression weight
    beta: float = 8.0         # voxel distillation weight
    lam: float = 1.0          # BEV distillation weight
    mu: float = 1.0           # response distillation weight
    context_margin: float = 0.8
    smooth_l1_beta: float = 1.0
    iou_mode: str = "3d"      # or "bev"

    def __post_init__(self):
        for name in ("tau", "pi1", "pi2", "alpha", "beta", "lam", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.pi1 > self.pi2:
            raise ValueError("pi1 must exceed pi2")


@dataclass(frozen=True)
class MatchedVoxelPair:
    coords: tuple[int, int, int]
    student_row: int
    teacher_row: int


class SubsetViolation(RuntimeError):
    """A student voxel coordinate is missing on the teacher side."""


def select_and_match_voxels(student_grid, teacher_grid,
                            gt_boxes: list[BoundingBox3D],
                            context_margin: float = 0.8) -> list[MatchedVoxelPair]:
    """Student voxels whose centers fall in a margin-enlarged GT box, paired
    with the teacher voxel at identical integer coordinates.

    The single-frame cloud is a prefix of the multi-frame one, so every
    student voxel must exist on the teacher side; a miss is a hard error.
    """
    if not gt_boxes or len(student_grid) == 0:
        return []
    centers = student_grid.config.voxel_center(student_grid.coords)
    selected = np.zeros(len(student_grid), dtype=bool)
    for box in gt_boxes:
        rel = centers - box.center
        c, s = math.cos(-box.yaw), math.sin(-box.yaw)
        lx = c * rel[:, 0] - s * rel[:, 1]
        ly = s * rel[:, 0] + c * rel[:, 1]
        half = 0.5 * np.array([box.l + context_margin, box.w + context_margin,
                               box.h + context_margin])
        inside = ((np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1])
                  & (np.abs(rel[:, 2]) <= half[2]))
        selected |= inside
    teacher_lut = {tuple(c): i for i, c in enumerate(teacher_grid.coords.tolist())}
    pairs = []
    for i in np.nonzero(selected)[0]:
        key = tuple(student_grid.coords[i].tolist())
        j = teacher_lut.get(key)
        if j is None:
            raise SubsetViolation(
                f"student voxel {key} has no teacher voxel: subset property violated")
        pairs.append(MatchedVoxelPair(key, int(i), j))
    return pairs


class AttentionEncoder(Module):
    """Multi-head self attention over selected voxels plus a two-layer FFN,
    both with residual connections.

    Per head: query/key/value projections C -> C/heads without bias, and a
    bias-free scalar relative-position logit from the 3-D displacement of
    voxel centers in meters. Output projection and FFN carry biases.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 prefix: str = "att"):
        super().__init__(prefix)
        if channels % heads:
            raise ValueError("channels must divide by heads")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        scale = 1.0 / math.sqrt(channels)
        # q/k start small so initial logits stay O(1) even when the input
        # features are several units wide; saturated softmax rows train badly
        qk_scale = 1.0 / channels
        self.add_param("wq", rng.normal(scale=qk_scale, size=(channels, channels)))
        self.add_param("wk", rng.normal(scale=qk_scale, size=(channels, channels)))
        self.add_param("wv", rng.normal(scale=scale, size=(channels, channels)))
        self.add_param("wr", rng.normal(scale=scale, size=(3, heads)))
        self.add_param("wo", rng.normal(scale=scale, size=(channels, channels)))
        self.add_param("bo", np.zeros(channels))
        self.add_param("ffn_w1", _he(rng, (channels, channels), channels))
        self.add_param("ffn_b1", np.zeros(channels))
        self.add_param("ffn_w2", _he(rng, (channels, channels), channels))
        self.add_param("ffn_b2", np.zeros(channels))

    def forward(self, features: Tensor, centers_m: np.ndarray) -> Tensor:
        """features [N, C]; centers_m [N, 3] voxel centers in meters."""
        n = features.shape[0]
        if n == 0:
            raise ValueError("attention encoder needs at least one voxel")
        p = self.params
        disp = centers_m[:, None, :] - centers_m[None, :, :]       # [N, N, 3]
        rel_t = ad.reshape(ad.matmul(Tensor(disp.reshape(n * n, 3)), p["wr"]),
                           (n, n, self.heads))

        q = ad.matmul(features, p["wq"])
        k = ad.matmul(features, p["wk"])
        v = ad.matmul(features, p["wv"])
        inv_sqrt = 1.0 / math.sqrt(self.head_dim)
        head_outs = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)) + rel_t[:, :, h],
                              inv_sqrt)
            attn = ad.softmax(scores, axis=1)
            head_outs.append(ad.matmul(attn, vh))
        concat = ad.concat(head_outs, axis=1)
        attended = ad.matmul(concat, p["wo"]) + p["bo"] + features
        ffn = ad.relu(ad.matmul(attended, p["ffn_w1"]) + p["ffn_b1"])
        ffn = ad.relu(ad.matmul(ffn, p["ffn_w2"]) + p["ffn_b2"])
        return ffn + attended

    def attention_rows(self, features: Tensor, centers_m: np.ndarray) -> np.ndarray:
        """Per-head softmax rows (for invariant tests): [heads, N, N]."""
        n = features.shape[0]
        p = self.params
        disp = centers_m[:, None, :] - centers_m[None, :, :]
        rel = (disp.reshape(n * n, 3) @ p["wr"].data).reshape(n, n, self.heads)
        q = features.data @ p["wq"].data
        k = features.data @ p["wk"].data
        out = np.empty((self.heads, n, n))
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            scores = (q[:, lo:hi] @ k[:, lo:hi].T + rel[:, :, h]) / math.sqrt(self.head_dim)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            out[h] = e / e.sum(axis=1, keepdims=True)
        return out


def voxel_distill_loss(encoded_student: Tensor, teacher_rows: Tensor,
                       normalize: bool = False) -> Tensor:
    """Mean over voxels of the squared L2 distance between feature rows.

    The default is the plain formula. The trainer passes normalize=True,
    which divides by the teacher rows' mean squared norm (a per-frame
    constant); see bev_distill_loss for why raw feature magnitudes are
    unusable with a normalization-free backbone.
    """
    if encoded_student.shape != teacher_rows.shape:
        raise ad.ShapeError("voxel_distill_loss", encoded_student.shape,
                            teacher_rows.shape)
    n = encoded_student.shape[0]
    scale = 1.0 / n
    if normalize:
        ref = float((teacher_rows.data ** 2).sum(axis=1).mean())
        scale /= max(ref, 1e-6)
    diff = ad.sub(encoded_student, teacher_rows)
    return ad.scale(ad.sum_(ad.mul(diff, diff)), scale)


# --- multi-scale BEV distillation ------------------------------------------------

class BevAdapters(Module):
    """Per-level 1x1 conv + ReLU mapping student taps onto teacher taps."""

    def __init__(self, channel_list: list[int], rng: np.random.Generator,
                 prefix: str = "bevadapt"):
        super().__init__(prefix)
        self.channel_list = list(channel_list)
        for i, c in enumerate(self.channel_list):
            self.add_param(f"w{i}", _he(rng, (c, c, 1, 1), c))
            # positive bias keeps the ReLU off its kink at empty BEV cells,
            # whose features are exactly zero
            self.add_param(f"b{i}", np.full(c, 0.05))

    def adapt(self, level: int, tap: Tensor) -> Tensor:
        p = self.params
        return ad.relu(ad.conv2d(tap, p[f"w{level}"], p[f"b{level}"]))


def bev_foreground_mask(gt_boxes: list[BoundingBox3D],
                        config: DetectorConfig) -> np.ndarray:
    """[H, W] float mask: 1 where the cell center lies in any rotated GT
    footprint."""
    mask = np.zeros((config.ny, config.nx))
    if not gt_boxes:
        return mask
    xs = config.x_range[0] + (np.arange(config.nx) + 0.5) * config.voxel_xy
    ys = config.y_range[0] + (np.arange(config.ny) + 0.5) * config.voxel_xy
    gx, gy = np.meshgrid(xs, ys)
    for box in gt_boxes:
        dx, dy = gx - box.center[0], gy - box.center[1]
        c, s = math.cos(-box.yaw), math.sin(-box.yaw)
        lx = c * dx - s * dy
        ly = s * dx + c * dy
        mask[(np.abs(lx) <= box.l / 2) & (np.abs(ly) <= box.w / 2)] = 1.0
    return mask


def bev_distill_loss(student_taps: list[Tensor], teacher_taps: list[Tensor],
                     adapters: BevAdapters, mask: np.ndarray) -> Tensor:
    """Sum over levels of masked mean squared feature distance after the
    student-side adapter; empty masks contribute zero.

    Each level is normalized by the teacher's mean squared feature norm
    over the masked cells (a per-frame constant). The toy backbone has no
    normalization layers, so raw feature magnitudes drift freely during
    teacher training; without this the BEV term's scale would swamp the
    other losses at some checkpoints and vanish at others.
    """
    if len(student_taps) != len(teacher_taps):
        raise ValueError("tap count mismatch")
    count = float(mask.sum())
    if count == 0:
        return Tensor(np.zeros(()))
    mask_t = Tensor(mask[None, :, :])
    total = None
    for level, (s, t) in enumerate(zip(student_taps, teacher_taps)):
        adapted = adapters.adapt(level, s)
        if adapted.shape != t.shape:
            raise ad.ShapeError("bev_distill_loss", adapted.shape, t.shape)
        ref = float(((t.data ** 2).sum(axis=0) * mask).sum()) / count
        diff = ad.sub(adapted, Tensor(t.data))
        level_loss = ad.scale(ad.sum_(ad.mul(ad.mul(diff, diff), mask_t)),
                              1.0 / (count * max(ref, 1e-6)))
        total = level_loss if total is None else total + level_loss
    return total


# --- adaptive response distillation ------------------------------------------------

def foreground_mask(gt_heatmap: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Boolean mask of (class, y, x) positions with GT target above tau."""
    return gt_heatmap > tau


def sum_preserving_weights(salience: np.ndarray, losses: np.ndarray) -> np.ndarray | None:
    """w_i = salience_i * sum(L) / sum(salience * L); None when degenerate.

    By construction sum(w * L) == sum(L), so the reweighting redistributes
    emphasis without changing the total.
    """
    den = float((salience * losses).sum())
    if den == 0.0:
        return None
    return salience * (losses.sum() / den)


def adaptive_cls_loss(h_s: Tensor, h_m: np.ndarray, mask: np.ndarray,
                      beta: float = 1.0,
                      frozen_weights: np.ndarray | None = None):
    """Eq-style confidence-weighted heatmap distillation.

    Returns (loss, weights) where weights is the full-map array actually
    applied (constant w.r.t. the tape). Passing frozen_weights re-applies a
    previous weighting, which is what makes finite-difference checks of the
    surrounding graph well-defined.
    """
    n_fg = int(mask.sum())
    if n_fg == 0:
        log.warning("adaptive_cls_loss: empty foreground set, returning 0")
        return Tensor(np.zeros(())), np.zeros_like(h_m)
    losses = ad.smooth_l1(h_s, Tensor(h_m), beta)
    if frozen_weights is None:
        w = sum_preserving_weights(h_s.data[mask], losses.data[mask])
        if w is None:
            return Tensor(np.zeros(())), np.zeros_like(h_m)
        weights = np.zeros_like(h_m)
        weights[mask] = w
    else:
        weights = frozen_weights
    loss = ad.scale(ad.sum_(ad.mul(losses, Tensor(weights))), 1.0 / n_fg)
    return loss, weights


def decode_reg_rows(reg: Tensor, centers: list[tuple[int, int, int]],
                    config: DetectorConfig) -> Tensor:
    """Differentiably decode regression vectors at center cells to
    (cx, cy, z, w, l, h, yaw) rows [n, 7]."""
    flat_idx = [iy * config.nx + ix for _, iy, ix in centers]
    k = reg.shape[0]
    rows = ad.index_rows(ad.transpose(ad.reshape(reg, (k, -1))), flat_idx)
    ix = np.array([c[2] for c in centers], dtype=np.float64)
    iy = np.array([c[1] for c in centers], dtype=np.float64)
    cx = ad.scale(rows[:, 0:1] + Tensor(ix[:, None]), config.voxel_xy) \
        + Tensor(np.full((len(centers), 1), config.x_range[0]))
    cy = ad.scale(rows[:, 1:2] + Tensor(iy[:, None]), config.voxel_xy) \
        + Tensor(np.full((len(centers), 1), config.y_range[0]))
    z = rows[:, 2:3]
    sizes = ad.exp(ad.clip(rows[:, 3:6], -8.0, 8.0))
    yaw = ad.atan2(rows[:, 6:7], rows[:, 7:8])
    return ad.concat([cx, cy, z, sizes, yaw], axis=1)


def _boxes_from_decoded(decoded: np.ndarray,
                        centers: list[tuple[int, int, int]]) -> list[BoundingBox3D]:
    out = []
    for row, (cls, _, _) in zip(decoded, centers):
        sizes = np.clip(row[3:6], 1e-3, 1e3)
        out.append(BoundingBox3D(center=row[:3], size=sizes,
                                 yaw=wrap_angle(row[6]), class_id=cls))
    return out


def adaptive_reg_loss(reg_s: Tensor, reg_m: np.ndarray,
                      centers: list[tuple[int, int, int]],
                      config: DetectorConfig, beta: float = 1.0,
                      iou_mode: str = "3d",
                      frozen_weights: np.ndarray | None = None):
    """IoU-weighted regression distillation at GT center cells.

    Both regressions are decoded to world-frame boxes; the per-center loss
    is the mean smooth-L1 over the 7 decoded dimensions and the weight is
    the (constant) IoU between the two decoded boxes, normalized to keep
    the loss sum unchanged. Returns (loss, weights).
    """
    n = len(centers)
    if n == 0:
        log.warning("adaptive_reg_loss: no foreground centers, returning 0")
        return Tensor(np.zeros(())), np.zeros(0)
    dec_s = decode_reg_rows(reg_s, centers, config)
    dec_m = decode_reg_rows(Tensor(reg_m), centers, config)
    per_dim = ad.smooth_l1(dec_s, Tensor(dec_m.data), beta)
    per_center = ad.mean(per_dim, axis=1)
    if frozen_weights is None:
        boxes_s = _boxes_from_decoded(dec_s.data, centers)
        boxes_m = _boxes_from_decoded(dec_m.data, centers)
        ious = np.array([box_iou(a, b, iou_mode) for a, b in zip(boxes_s, boxes_m)])
        weights = sum_preserving_weights(ious, per_center.data)
        if weights is None:
            return Tensor(np.zeros(())), np.zeros(n)
    else:
        weights = frozen_weights
    loss = ad.scale(ad.sum_(ad.mul(per_center, Tensor(weights))), 1.0 / n)
    return loss, weights


def response_distill_loss(l_cls: Tensor, l_reg: Tensor, pi1: float,
                          pi2: float) -> Tensor:
    return ad.scale(l_cls, pi1) + ad.scale(l_reg, pi2)


# --- student-side training assembly -------------------------------------------------

class StudentAux:
    """Trainable student-only modules: attention encoder + BEV adapters."""

    def __init__(self, config: DetectorConfig, seed: int = 0):
        rng = np.random.default_rng(seed + 7919)
        self.attention = AttentionEncoder(config.feat_channels,
                                          config.attention_heads, rng)
        taps = [config.bottleneck_mid] * 3 + [config.fuse_channels]
        self.adapters = BevAdapters(taps, rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.attention.named_params())
        out.update(self.adapters.named_params())
        return out

    def set_requires_grad(self, flag: bool):
        self.attention.set_requires_grad(flag)
        self.adapters.set_requires_grad(flag)

    def load(self, state: dict[str, np.ndarray]):
        self.attention.load(state)
        self.adapters.load(state)


@dataclass
class DistillBreakdown:
    l_vxl: Tensor
    l_bev: Tensor
    l_rsp_c: Tensor
    l_rsp_r: Tensor
    n_matched_voxels: int


def distill_losses(student_out: DetectorOutput, teacher_out: DetectorOutput,
                   aux: StudentAux, gt_boxes: list[BoundingBox3D],
                   gt_heatmap: np.ndarray, centers,
                   weights: DistillWeights,
                   enable_voxel: bool = True, enable_bev: bool = True,
                   enable_rsp: bool = True,
                   frozen_cls_weights: np.ndarray | None = None,
                   frozen_reg_weights: np.ndarray | None = None) -> DistillBreakdown:
    """All three distillation terms for one frame (teacher side constant).

    frozen_*_weights re-apply a previously computed adaptive weighting;
    the gradient-check harness uses this to make the response losses a
    fixed function of the student parameters.
    """
    cfg = student_out.grid.config
    zero = Tensor(np.zeros(()))

    l_vxl = zero
    n_matched = 0
    if enable_voxel:
        pairs = select_and_match_voxels(student_out.grid, teacher_out.grid,
                                        gt_boxes, weights.context_margin)
        n_matched = len(pairs)
        if pairs:
            s_rows = ad.index_rows(student_out.voxel_features,
                                   [p.student_row for p in pairs])
            centers_m = cfg.voxel_center(
                np.array([p.coords for p in pairs], dtype=np.int64))
            encoded = aux.attention.forward(s_rows, centers_m)
            t_rows = Tensor(teacher_out.voxel_features.data[
                [p.teacher_row for p in pairs]])
            l_vxl = voxel_distill_loss(encoded, t_rows, normalize=True)

    l_bev = zero
    if enable_bev:
        mask = bev_foreground_mask(gt_boxes, cfg)
        l_bev = bev_distill_loss(student_out.bottlenecks, teacher_out.bottlenecks,
                                 aux.adapters, mask)

    l_rsp_c = zero
    l_rsp_r = zero
    if enable_rsp:
        fg = foreground_mask(gt_heatmap, weights.tau)
        l_rsp_c, _ = adaptive_cls_loss(student_out.heatmap,
                                       teacher_out.heatmap.data, fg,
                                       weights.smooth_l1_beta,
                                       frozen_weights=frozen_cls_weights)
        l_rsp_r, _ = adaptive_reg_loss(student_out.reg, teacher_out.reg.data,
                                       centers, cfg, weights.smooth_l1_beta,
                                       weights.iou_mode,
                                       frozen_weights=frozen_reg_weights)
    return DistillBreakdown(l_vxl, l_bev, l_rsp_c, l_rsp_r, n_matched)


def total_loss(l_cls: Tensor, l_reg: Tensor, breakdown: DistillBreakdown,
               w: DistillWeights, ramp: float = 1.0) -> Tensor:
    """Supervision plus the three weighted distillation terms.

    ramp linearly scales the distillation part (training warmup): early in
    training the student and teacher feature spaces are unrelated, and the
    full-strength alignment gradient would swamp the supervised signal.
    """
    rsp = response_distill_loss(breakdown.l_rsp_c, breakdown.l_rsp_r, w.pi1, w.pi2)
    distill_part = (ad.scale(breakdown.l_vxl, w.beta)
                    + ad.scale(breakdown.l_bev, w.lam) + ad.scale(rsp, w.mu))
    return l_cls + ad.scale(l_reg, w.alpha) + ad.scale(distill_part, ramp)
