"""Toy voxel detector shared by teacher and student.

The pipeline is voxelize -> per-voxel encoder -> BEV scatter -> multi-scale
RPN -> center-style heads. Teacher and student use identical architecture;
they differ only in the input cloud (assembled multi-frame vs single frame).

Voxel coordinates survive the encoder unchanged, which is what lets the
distillation stage match student and teacher voxels by integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import BoundingBox3D, PointCloud, wrap_angle

REG_DIMS = 8  # dx, dy, z, log w, log l, log h, sin yaw, cos yaw


@dataclass
class DetectorConfig:
    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    z_range: tuple[float, float] = (-0.5, 2.5)
    voxel_xy: float = 0.25
    voxel_z: float = 0.25
    feat_channels: int = 32
    rpn_widths: tuple[int, int, int] = (64, 128, 256)
    bottleneck_mid: int = 64
    fuse_channels: int = 128
    head_channels: int = 64
    num_classes: int = 2
    attention_heads: int = 8
    min_overlap: float = 0.7     # gaussian radius rule
    score_threshold: float = 0.2
    max_detections: int = 64

    def __post_init__(self):
        if self.feat_channels % self.attention_heads:
            raise ValueError("feat_channels must divide by attention_heads")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.voxel_xy))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.voxel_xy))

    @property
    def nz(self) -> int:
        return int(round((self.z_range[1] - self.z_range[0]) / self.voxel_z))

    @property
    def bev_shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def voxel_center(self, coords: np.ndarray) -> np.ndarray:
        """World xyz of voxel centers for integer coords [N, 3] (ix, iy, iz)."""
        out = np.empty((coords.shape[0], 3))
        out[:, 0] = self.x_range[0] + (coords[:, 0] + 0.5) * self.voxel_xy
        out[:, 1] = self.y_range[0] + (coords[:, 1] + 0.5) * self.voxel_xy
        out[:, 2] = self.z_range[0] + (coords[:, 2] + 0.5) * self.voxel_z
        return out


def desk_config() -> DetectorConfig:
    return DetectorConfig()


def bench_config() -> DetectorConfig:
    """Small preset for the directional training experiments."""
    return DetectorConfig(
        x_range=(-6.0, 6.0), y_range=(-6.0, 6.0), z_range=(-0.25, 1.75),
        voxel_xy=0.25, voxel_z=0.25,
        feat_channels=16, rpn_widths=(24, 48, 96), bottleneck_mid=24,
        fuse_channels=48, head_channels=32,
    )


@dataclass
class SparseVoxelGrid:
    """Occupied voxels: unique integer coords plus row-aligned features."""

    coords: np.ndarray          # [N, 3] int64 (ix, iy, iz), lexicographically sorted
    features: np.ndarray        # [N, 5] raw voxel stats
    config: DetectorConfig

    def __len__(self) -> int:
        return self.coords.shape[0]


def voxelize(cloud: PointCloud, config: DetectorConfig) -> SparseVoxelGrid:
    """Bucket points into voxels; drops out-of-range points.

    Per-voxel feature: mean xyz offset from the voxel center, mean
    intensity, and a bounded count feature n / (n + 4).
    """
    pts = cloud.points
    if pts.shape[0] == 0:
        return SparseVoxelGrid(np.zeros((0, 3), dtype=np.int64),
                               np.zeros((0, 5)), config)
    in_range = (
        (pts[:, 0] >= config.x_range[0]) & (pts[:, 0] < config.x_range[1])
        & (pts[:, 1] >= config.y_range[0]) & (pts[:, 1] < config.y_range[1])
        & (pts[:, 2] >= config.z_range[0]) & (pts[:, 2] < config.z_range[1])
    )
    pts = pts[in_range]
    if pts.shape[0] == 0:
        return SparseVoxelGrid(np.zeros((0, 3), dtype=np.int64),
                               np.zeros((0, 5)), config)
    ix = np.floor((pts[:, 0] - config.x_range[0]) / config.voxel_xy).astype(np.int64)
    iy = np.floor((pts[:, 1] - config.y_range[0]) / config.voxel_xy).astype(np.int64)
    iz = np.floor((pts[:, 2] - config.z_range[0]) / config.voxel_z).astype(np.int64)
    ix = np.clip(ix, 0, config.nx - 1)
    iy = np.clip(iy, 0, config.ny - 1)
    iz = np.clip(iz, 0, config.nz - 1)
    flat = (ix * config.ny + iy) * config.nz + iz
    uniq, inv = np.unique(flat, return_inverse=True)
    n = len(uniq)
    counts = np.bincount(inv, minlength=n).astype(np.float64)
    sums = np.zeros((n, 4))
    np.add.at(sums, inv, pts[:, :4])
    means = sums / counts[:, None]

    coords = np.empty((n, 3), dtype=np.int64)
    coords[:, 2] = uniq % config.nz
    rest = uniq // config.nz
    coords[:, 1] = rest % config.ny
    coords[:, 0] = rest // config.ny

    centers = config.voxel_center(coords)
    feats = np.empty((n, 5))
    feats[:, :3] = means[:, :3] - centers
    feats[:, 3] = means[:, 3]
    feats[:, 4] = counts / (counts + 4.0)
    return SparseVoxelGrid(coords, feats, config)


# --- parameter helpers -----------------------------------------------------------

def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Minimal named-parameter container."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = ad.parameter(data, name=f"{self.prefix}.{name}")
        self.params[name] = t
        return t

    def named_params(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def load(self, state: dict[str, np.ndarray]):
        for k, v in self.named_params().items():
            if k not in state:
                raise KeyError(f"checkpoint missing parameter {k}")
            if state[k].shape != v.data.shape:
                raise ValueError(f"shape mismatch for {k}: "
                                 f"{state[k].shape} vs {v.data.shape}")
            v.data = state[k].astype(np.float64).copy()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class VoxelEncoder(Module):
    """Per-voxel 2-layer MLP plus one 6-neighborhood mixing step.

    Coordinates pass through untouched so teacher/student coordinate
    matching stays valid downstream.
    """

    def __init__(self, config: DetectorConfig, rng: np.random.Generator,
                 prefix: str = "enc"):
        super().__init__(prefix)
        c = config.feat_channels
        self.config = config
        # positive biases keep ReLU pre-activations off the kink when a
        # voxel's previous layer comes out entirely dead
        self.add_param("w0", _he(rng, (5, c), 5))
        self.add_param("b0", np.full(c, 0.05))
        self.add_param("w1", _he(rng, (c, c), c))
        self.add_param("b1", np.full(c, 0.05))
        self.add_param("mix_w", _he(rng, (2 * c, c), 2 * c))
        self.add_param("mix_b", np.zeros(c))

    @staticmethod
    def neighbor_edges(coords: np.ndarray):
        """(rows, cols, inv_degree) for the 6-connected occupied adjacency."""
        lut = {tuple(c): i for i, c in enumerate(coords.tolist())}
        rows, cols = [], []
        for i, c in enumerate(coords.tolist()):
            for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                j = lut.get((c[0] + d[0], c[1] + d[1], c[2] + d[2]))
                if j is not None:
                    rows.append(i)
                    cols.append(j)
        rows = np.array(rows, dtype=np.int64)
        cols = np.array(cols, dtype=np.int64)
        deg = np.bincount(rows, minlength=len(coords)).astype(np.float64)
        inv = np.zeros(len(coords))
        nz = deg > 0
        inv[nz] = 1.0 / deg[nz]
        return rows, cols, inv

    def forward(self, grid: SparseVoxelGrid) -> Tensor:
        p = self.params
        h = ad.relu(ad.matmul(Tensor(grid.features), p["w0"]) + p["b0"])
        h = ad.relu(ad.matmul(h, p["w1"]) + p["b1"])
        rows, cols, inv = self.neighbor_edges(grid.coords)
        nb = ad.neighbor_mean(h, rows, cols, inv)
        mixed = ad.matmul(ad.concat([h, nb], axis=1), p["mix_w"]) + p["mix_b"]
        return mixed


def scatter_to_bev(features: Tensor, grid: SparseVoxelGrid) -> Tensor:
    """Max-pool voxel features over z into their (ix, iy) BEV cell."""
    cfg = grid.config
    if len(grid) == 0:
        return Tensor(np.zeros((features.shape[1] if features.data.ndim == 2
                                else cfg.feat_channels, cfg.ny, cfg.nx)))
    cells = grid.coords[:, 1] * cfg.nx + grid.coords[:, 0]
    return ad.scatter_max_bev(features, cells, cfg.ny, cfg.nx)


class MultiScaleRPN(Module):
    """Three conv scales with top-down deconv enrichment, per-scale
    bottlenecks, and spatial-softmax fusion.

    All convs and deconvs are bias-free so a zero BEV input produces an
    exactly-zero fused output. Returns the fused map plus four distillation
    taps: the three bottleneck middles and the fused map itself.
    """

    def __init__(self, in_channels: int, widths: tuple[int, int, int],
                 mid: int, fuse: int, rng: np.random.Generator,
                 prefix: str = "rpn"):
        super().__init__(prefix)
        w1, w2, w3 = widths
        self.widths = widths
        self.mid = mid
        self.fuse = fuse

        def conv_p(name, cin, cout, k):
            self.add_param(name, _he(rng, (cout, cin, k, k), cin * k * k))

        conv_p("g1c1", in_channels, w1, 3)
        conv_p("g1c2", w1, w1, 3)
        conv_p("g1c3", w1, w1, 3)
        conv_p("g2c1", w1, w2, 3)
        conv_p("g2c2", w2, w2, 3)
        conv_p("g2c3", w2, w2, 3)
        conv_p("g3c1", w2, w3, 3)
        conv_p("g3c2", w3, w3, 3)
        conv_p("g3c3", w3, w3, 3)
        # deconv weights use [Cin, Cout, kh, kw]
        self.add_param("d32", _he(rng, (w3, w2, 3, 3), w3 * 9))
        self.add_param("d21", _he(rng, (w2, w1, 3, 3), w2 * 9))
        for i, w in enumerate((w1, w2, w3), start=1):
            conv_p(f"bn{i}a", w, mid, 1)
            conv_p(f"bn{i}b", mid, fuse, 1)
            conv_p(f"sw{i}", fuse, 1, 1)

    def forward(self, bev: Tensor, return_weights: bool = False):
        p = self.params

        def block(x, names, first_stride):
            x = ad.relu(ad.conv2d(x, p[names[0]], stride=first_stride))
            x = ad.relu(ad.conv2d(x, p[names[1]]))
            x = ad.relu(ad.conv2d(x, p[names[2]]))
            return x

        g1 = block(bev, ("g1c1", "g1c2", "g1c3"), 1)
        g2 = block(g1, ("g2c1", "g2c2", "g2c3"), 2)
        g3 = block(g2, ("g3c1", "g3c2", "g3c3"), 2)

        e2 = ad.relu(g2 + ad.deconv2d(g3, p["d32"]))
        e1 = ad.relu(g1 + ad.deconv2d(e2, p["d21"]))
        ups = [e1, ad.bilinear_upsample(e2, 2), ad.bilinear_upsample(g3, 4)]

        mids, outs, logits = [], [], []
        for i, u in enumerate(ups, start=1):
            mid = ad.relu(ad.conv2d(u, p[f"bn{i}a"]))
            out = ad.conv2d(mid, p[f"bn{i}b"])
            mids.append(mid)
            outs.append(out)
            logits.append(ad.conv2d(out, p[f"sw{i}"]))
        weights = ad.softmax(ad.concat(logits, axis=0), axis=0)
        fused = None
        for i, out in enumerate(outs):
            term = ad.mul(weights[i:i + 1], out)
            fused = term if fused is None else fused + term
        if return_weights:
            return fused, mids + [fused], weights
        return fused, mids + [fused]


class RawRPN(Module):
    """Two stride-2 conv blocks with deconv merge: the ablation baseline.

    Bias-free like the multi-scale RPN; output is upsampled back to the
    input spatial shape.
    """

    def __init__(self, in_channels: int, widths: tuple[int, int] = (144, 288),
                 up: int = 256, out: int = 256,
                 rng: np.random.Generator | None = None, prefix: str = "rawrpn"):
        super().__init__(prefix)
        rng = rng or np.random.default_rng(0)
        f1, f2 = widths

        def conv_p(name, cin, cout, k):
            self.add_param(name, _he(rng, (cout, cin, k, k), cin * k * k))

        conv_p("b1c1", in_channels, f1, 3)
        conv_p("b1c2", f1, f1, 3)
        conv_p("b1c3", f1, f1, 3)
        conv_p("b2c1", f1, f2, 3)
        conv_p("b2c2", f2, f2, 3)
        conv_p("b2c3", f2, f2, 3)
        conv_p("u1", f1, up, 3)
        self.add_param("u2", _he(rng, (f2, up, 3, 3), f2 * 9))  # deconv
        conv_p("merge", 2 * up, out, 3)

    def forward(self, bev: Tensor) -> Tensor:
        p = self.params
        x = ad.relu(ad.conv2d(bev, p["b1c1"], stride=2))
        x = ad.relu(ad.conv2d(x, p["b1c2"]))
        b1 = ad.relu(ad.conv2d(x, p["b1c3"]))
        y = ad.relu(ad.conv2d(b1, p["b2c1"], stride=2))
        y = ad.relu(ad.conv2d(y, p["b2c2"]))
        b2 = ad.relu(ad.conv2d(y, p["b2c3"]))
        u1 = ad.relu(ad.conv2d(b1, p["u1"]))
        u2 = ad.relu(ad.deconv2d(b2, p["u2"]))
        merged = ad.relu(ad.conv2d(ad.concat([u1, u2], axis=0), p["merge"]))
        return ad.bilinear_upsample(merged, 2)


class DetectionHead(Module):
    """Shared 3x3 conv, then 1x1 sigmoid heatmap and 1x1 regression branches."""

    def __init__(self, in_channels: int, head_channels: int, num_classes: int,
                 rng: np.random.Generator, prefix: str = "head"):
        super().__init__(prefix)
        self.add_param("shared_w", _he(rng, (head_channels, in_channels, 3, 3),
                                       in_channels * 9))
        # positive bias: empty BEV cells carry exactly-zero features, and a
        # zero bias would park the ReLU on its kink there
        self.add_param("shared_b", np.full(head_channels, 0.05))
        self.add_param("hm_w", rng.normal(scale=0.01,
                                          size=(num_classes, head_channels, 1, 1)))
        # bias so initial foreground probability sits near 0.1
        self.add_param("hm_b", np.full(num_classes, -2.19))
        self.add_param("reg_w", rng.normal(scale=0.01,
                                           size=(REG_DIMS, head_channels, 1, 1)))
        self.add_param("reg_b", np.zeros(REG_DIMS))

    def forward(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        shared = ad.relu(ad.conv2d(fused, p["shared_w"], p["shared_b"]))
        heatmap = ad.sigmoid(ad.conv2d(shared, p["hm_w"], p["hm_b"]))
        reg = ad.conv2d(shared, p["reg_w"], p["reg_b"])
        return heatmap, reg


# --- ground-truth targets ----------------------------------------------------------

def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Smallest of the three quadratic-root radii guaranteeing the given
    overlap between shifted and original footprints (corrected roots)."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * c1, 0.0))) / 2

    a2, b2 = 4.0, 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(max(b2 * b2 - 4 * a2 * c2, 0.0))) / (2 * a2)

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return min(r1, r2, r3)


def _center_cell(box: BoundingBox3D, config: DetectorConfig):
    cx = (box.center[0] - config.x_range[0]) / config.voxel_xy
    cy = (box.center[1] - config.y_range[0]) / config.voxel_xy
    ix, iy = int(math.floor(cx)), int(math.floor(cy))
    if not (0 <= ix < config.nx and 0 <= iy < config.ny):
        return None
    return ix, iy, cx, cy


def build_gt_heatmap(boxes: list[BoundingBox3D], config: DetectorConfig) -> np.ndarray:
    """Gaussian-splatted targets [K, H, W]; overlaps take the max and object
    centers are exactly 1."""
    hm = np.zeros((config.num_classes, config.ny, config.nx))
    for box in boxes:
        cell = _center_cell(box, config)
        if cell is None or not (0 <= box.class_id < config.num_classes):
            continue
        ix, iy, _, _ = cell
        radius = max(1, int(gaussian_radius(box.l / config.voxel_xy,
                                            box.w / config.voxel_xy,
                                            config.min_overlap)))
        sigma = radius / 3.0
        y0, y1 = max(0, iy - radius), min(config.ny - 1, iy + radius)
        x0, x1 = max(0, ix - radius), min(config.nx - 1, ix + radius)
        ys = np.arange(y0, y1 + 1)
        xs = np.arange(x0, x1 + 1)
        g = np.exp(-(((xs[None, :] - ix) ** 2 + (ys[:, None] - iy) ** 2)
                     / (2 * sigma * sigma)))
        region = hm[box.class_id, y0:y1 + 1, x0:x1 + 1]
        np.maximum(region, g, out=region)
    return hm


def build_gt_regression(boxes: list[BoundingBox3D], config: DetectorConfig):
    """Regression targets [REG_DIMS, H, W] written at center cells.

    Returns (targets, centers) where centers is a list of
    (class_id, iy, ix); duplicate cells keep the last box.
    """
    reg = np.zeros((REG_DIMS, config.ny, config.nx))
    centers: list[tuple[int, int, int]] = []
    seen = {}
    for box in boxes:
        cell = _center_cell(box, config)
        if cell is None or not (0 <= box.class_id < config.num_classes):
            continue
        ix, iy, cx, cy = cell
        reg[:, iy, ix] = [cx - ix, cy - iy, box.center[2],
                          math.log(box.size[0]), math.log(box.size[1]),
                          math.log(box.size[2]),
                          math.sin(box.yaw), math.cos(box.yaw)]
        seen[(iy, ix)] = box.class_id
    centers = [(cls, iy, ix) for (iy, ix), cls in seen.items()]
    return reg, centers


def decode_detections(heatmap: np.ndarray, reg: np.ndarray,
                      config: DetectorConfig,
                      score_threshold: float | None = None,
                      max_detections: int | None = None):
    """3x3 local-max peak picking + box reconstruction.

    Returns a list of (BoundingBox3D, score) sorted by descending score.
    """
    thr = config.score_threshold if score_threshold is None else score_threshold
    cap = config.max_detections if max_detections is None else max_detections
    k, h, w = heatmap.shape
    padded = np.full((k, h + 2, w + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heatmap
    local_max = heatmap.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            np.maximum(local_max, padded[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w],
                       out=local_max)
    peaks = np.argwhere((heatmap >= thr) & (heatmap == local_max))
    scored = sorted(
        ((float(heatmap[c, y, x]), int(c), int(y), int(x)) for c, y, x in peaks),
        key=lambda t: (-t[0], t[1], t[2], t[3]))
    out = []
    for score, c, iy, ix in scored[:cap]:
        v = reg[:, iy, ix]
        cx = config.x_range[0] + (ix + v[0]) * config.voxel_xy
        cy = config.y_range[0] + (iy + v[1]) * config.voxel_xy
        size = np.exp(np.clip(v[3:6], -6, 6))
        yaw = wrap_angle(math.atan2(v[6], v[7]))
        box = BoundingBox3D(center=[cx, cy, v[2]], size=size, yaw=yaw,
                            class_id=c, track_id=0)
        out.append((box, score))
    return out


# --- supervised loss ------------------------------------------------------------------

_EPS = 1e-12


def focal_heatmap_loss(heatmap: Tensor, gt: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss (exponents 2 and 4), normalized by the
    number of positive cells."""
    pos = gt >= 1.0
    n_pos = max(1, int(pos.sum()))
    p = ad.add(ad.scale(heatmap, 1.0 - 2 * _EPS), Tensor(np.full(gt.shape, _EPS)))
    one_minus_p = ad.sub(Tensor(np.ones(gt.shape)), p)
    pos_term = ad.mul(ad.mul(Tensor(pos.astype(float)), ad.pow_const(one_minus_p, 2.0)),
                      ad.log(p))
    neg_w = ((1.0 - gt) ** 4) * (~pos)
    neg_term = ad.mul(ad.mul(Tensor(neg_w), ad.pow_const(p, 2.0)), ad.log(one_minus_p))
    return ad.scale(ad.sum_(pos_term + neg_term), -1.0 / n_pos)


def regression_l1_loss(reg: Tensor, gt_reg: np.ndarray,
                       centers: list[tuple[int, int, int]]) -> Tensor:
    """Mean absolute error over regression dims at GT center cells."""
    if not centers:
        return Tensor(np.zeros(()))
    mask = np.zeros(gt_reg.shape)
    for _, iy, ix in centers:
        mask[:, iy, ix] = 1.0
    n = mask.sum()
    diff = ad.absolute(ad.sub(reg, Tensor(gt_reg)))
    return ad.scale(ad.sum_(ad.mul(diff, Tensor(mask))), 1.0 / n)


def supervised_loss(heatmap: Tensor, reg: Tensor, gt_heatmap: np.ndarray,
                    gt_reg: np.ndarray, centers, alpha: float = 2.0):
    """CenterPoint-style loss: focal classification + alpha * L1 regression."""
    l_cls = focal_heatmap_loss(heatmap, gt_heatmap)
    l_reg = regression_l1_loss(reg, gt_reg, centers)
    return l_cls + ad.scale(l_reg, alpha), l_cls, l_reg


# --- full detector ---------------------------------------------------------------------

@dataclass
class DetectorOutput:
    grid: SparseVoxelGrid
    voxel_features: Tensor            # [N, C] encoded rows
    bottlenecks: list[Tensor]         # 4 distillation taps
    fused: Tensor                     # [fuse, H, W]
    heatmap: Tensor                   # [K, H, W]
    reg: Tensor                       # [REG_DIMS, H, W]


class Detector:
    """Encoder + MS-RPN + heads with a flat named parameter dict."""

    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = VoxelEncoder(config, rng)
        self.rpn = MultiScaleRPN(config.feat_channels, config.rpn_widths,
                                 config.bottleneck_mid, config.fuse_channels, rng)
        self.head = DetectionHead(config.fuse_channels, config.head_channels,
                                  config.num_classes, rng)
        self.modules = [self.encoder, self.rpn, self.head]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for m in self.modules:
            out.update(m.named_params())
        return out

    def set_requires_grad(self, flag: bool):
        for m in self.modules:
            m.set_requires_grad(flag)

    def load(self, state: dict[str, np.ndarray]):
        for m in self.modules:
            m.load(state)

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.modules)

    def forward(self, cloud: PointCloud) -> DetectorOutput:
        grid = voxelize(cloud, self.config)
        if len(grid) == 0:
            raise ValueError("no points fall inside the detection range")
        feats = self.encoder.forward(grid)
        bev = scatter_to_bev(feats, grid)
        fused, bottlenecks = self.rpn.forward(bev)
        heatmap, reg = self.head.forward(fused)
        return DetectorOutput(grid, feats, bottlenecks, fused, heatmap, reg)
