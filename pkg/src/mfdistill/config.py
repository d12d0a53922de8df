"""Run configuration: flat INI-style sections with a strict schema.

Unknown sections or keys are rejected, and to_ini() echoes every value in
a form that parses back to the identical config, so manifests can embed
an exact copy of the run's configuration.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .backbone import DetectorConfig
from .distill import DistillWeights
from .fusion import FusionParams


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# (section, key) -> parser
_SCHEMA = {
    ("run", "seed"): int,
    ("run", "jobs"): int,
    ("data", "train_sequences"): int,
    ("data", "eval_sequences"): int,
    ("data", "frames_per_sequence"): int,
    ("data", "objects_per_scene"): int,
    ("fusion", "group_size"): int,
    ("fusion", "voxel_size"): _parse_floats,
    ("fusion", "max_per_voxel"): int,
    ("fusion", "denoise_fraction"): float,
    ("detector", "range"): float,
    ("detector", "z_min"): float,
    ("detector", "z_max"): float,
    ("detector", "cell"): float,
    ("detector", "voxel_z"): float,
    ("detector", "channels"): int,
    ("detector", "rpn_widths"): _parse_ints,
    ("detector", "bottleneck_mid"): int,
    ("detector", "fuse_channels"): int,
    ("detector", "head_channels"): int,
    ("detector", "num_classes"): int,
    ("detector", "score_threshold"): float,
    ("detector", "max_detections"): int,
    ("train", "teacher_steps"): int,
    ("train", "student_steps"): int,
    ("train", "lr_max"): float,
    ("train", "momentum"): float,
    ("train", "grad_clip"): float,
    ("train", "iou_vehicle"): float,
    ("train", "iou_pedestrian"): float,
    ("distill", "tau"): float,
    ("distill", "pi1"): float,
    ("distill", "pi2"): float,
    ("distill", "alpha"): float,
    ("distill", "beta"): float,
    ("distill", "lam"): float,
    ("distill", "mu"): float,
    ("distill", "context_margin"): float,
    ("distill", "smooth_l1_beta"): float,
    ("distill", "iou_mode"): str,
    ("distill", "enable_voxel"): _parse_bool,
    ("distill", "enable_bev"): _parse_bool,
    ("distill", "enable_rsp"): _parse_bool,
    ("distill", "teacher_mode"): str,
    ("distill", "warmup_steps"): int,
}

KEY_DOCS = {
    ("run", "seed"): "base RNG seed for data, init, and step order",
    ("run", "jobs"): "worker count for the parallel stages",
    ("data", "train_sequences"): "number of training sequences to generate",
    ("data", "eval_sequences"): "number of held-out evaluation sequences",
    ("data", "frames_per_sequence"): "frames per synthetic sequence",
    ("data", "objects_per_scene"): "objects per synthetic scene",
    ("fusion", "group_size"): "frames per fusion group",
    ("fusion", "voxel_size"): "fusion grid-subsampling voxel (x,y,z meters)",
    ("fusion", "max_per_voxel"): "max fused points kept per voxel",
    ("fusion", "denoise_fraction"): "outlier fraction removed during fusion",
    ("detector", "range"): "detection half-range in meters for x and y",
    ("detector", "z_min"): "detection range z minimum",
    ("detector", "z_max"): "detection range z maximum",
    ("detector", "cell"): "BEV cell / voxel xy size in meters",
    ("detector", "voxel_z"): "voxel z size in meters",
    ("detector", "channels"): "voxel feature channels C",
    ("detector", "rpn_widths"): "channel widths of the three RPN scales",
    ("detector", "bottleneck_mid"): "bottleneck middle channels (distill tap)",
    ("detector", "fuse_channels"): "channels of the fused RPN output",
    ("detector", "head_channels"): "shared detection-head channels",
    ("detector", "num_classes"): "number of object classes",
    ("detector", "score_threshold"): "decode score threshold",
    ("detector", "max_detections"): "decode detection cap per frame",
    ("train", "teacher_steps"): "teacher pretraining steps",
    ("train", "student_steps"): "student training steps",
    ("train", "lr_max"): "peak learning rate (cosine annealed to 0)",
    ("train", "momentum"): "SGD momentum",
    ("train", "grad_clip"): "global gradient-norm clip (0 disables)",
    ("train", "iou_vehicle"): "eval IoU threshold for the vehicle class",
    ("train", "iou_pedestrian"): "eval IoU threshold for the pedestrian class",
    ("distill", "tau"): "foreground threshold on the GT heatmap",
    ("distill", "pi1"): "classification response distillation weight",
    ("distill", "pi2"): "regression response distillation weight",
    ("distill", "alpha"): "supervised regression weight",
    ("distill", "beta"): "voxel distillation weight",
    ("distill", "lam"): "BEV distillation weight",
    ("distill", "mu"): "response distillation weight",
    ("distill", "context_margin"): "GT box enlargement for voxel selection (m)",
    ("distill", "smooth_l1_beta"): "smooth-L1 transition point",
    ("distill", "iou_mode"): "IoU flavor for Eq-8-style weights: 3d or bev",
    ("distill", "enable_voxel"): "ablation switch: voxel distillation",
    ("distill", "enable_bev"): "ablation switch: BEV distillation",
    ("distill", "enable_rsp"): "ablation switch: response distillation",
    ("distill", "teacher_mode"): "teacher input: multi or single frame",
    ("distill", "warmup_steps"): "steps to ramp distillation weights 0 -> 1",
}


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    train_sequences: int = 5
    eval_sequences: int = 3
    frames_per_sequence: int = 20
    objects_per_scene: int = 4
    group_size: int = 5
    voxel_size: tuple = (0.1, 0.1, 0.15)
    max_per_voxel: int = 5
    denoise_fraction: float = 0.005
    range: float = 6.0
    z_min: float = -0.25
    z_max: float = 1.75
    cell: float = 0.25
    voxel_z: float = 0.25
    channels: int = 16
    rpn_widths: tuple = (24, 48, 96)
    bottleneck_mid: int = 24
    fuse_channels: int = 48
    head_channels: int = 32
    num_classes: int = 2
    score_threshold: float = 0.1
    max_detections: int = 64
    teacher_steps: int = 600
    student_steps: int = 300
    lr_max: float = 0.005
    momentum: float = 0.9
    grad_clip: float = 10.0
    iou_vehicle: float = 0.5
    iou_pedestrian: float = 0.25
    tau: float = 0.1
    pi1: float = 2.0
    pi2: float = 1.0
    alpha: float = 2.0
    beta: float = 8.0
    lam: float = 1.0
    mu: float = 1.0
    context_margin: float = 0.8
    smooth_l1_beta: float = 1.0
    iou_mode: str = "3d"
    enable_voxel: bool = True
    enable_bev: bool = True
    enable_rsp: bool = True
    teacher_mode: str = "multi"
    warmup_steps: int = 60

    def __post_init__(self):
        if self.teacher_mode not in ("multi", "single"):
            raise ValueError("teacher_mode must be 'multi' or 'single'")
        if self.iou_mode not in ("3d", "bev"):
            raise ValueError("iou_mode must be '3d' or 'bev'")

    # --- views into module-level configs ---

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            x_range=(-self.range, self.range),
            y_range=(-self.range, self.range),
            z_range=(self.z_min, self.z_max),
            voxel_xy=self.cell, voxel_z=self.voxel_z,
            feat_channels=self.channels,
            rpn_widths=tuple(self.rpn_widths),
            bottleneck_mid=self.bottleneck_mid,
            fuse_channels=self.fuse_channels,
            head_channels=self.head_channels,
            num_classes=self.num_classes,
            score_threshold=self.score_threshold,
            max_detections=self.max_detections,
        )

    def distill_weights(self) -> DistillWeights:
        return DistillWeights(
            tau=self.tau, pi1=self.pi1, pi2=self.pi2, alpha=self.alpha,
            beta=self.beta, lam=self.lam, mu=self.mu,
            context_margin=self.context_margin,
            smooth_l1_beta=self.smooth_l1_beta, iou_mode=self.iou_mode,
        )

    def fusion_params(self) -> FusionParams:
        return FusionParams(
            group_size=self.group_size,
            voxel_size=tuple(self.voxel_size),
            max_per_voxel=self.max_per_voxel,
            denoise_fraction=self.denoise_fraction,
        )

    def iou_thresholds(self) -> dict[int, float]:
        return {0: self.iou_vehicle, 1: self.iou_pedestrian}

    def distance_bands(self) -> tuple[float, float]:
        # mirrors the three-band breakdown, scaled to the detection range
        return (0.375 * self.range, 0.625 * self.range)

    def all_distill_disabled(self) -> bool:
        return not (self.enable_voxel or self.enable_bev or self.enable_rsp)

    # --- INI serialization ---

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for (section, key), _ in _SCHEMA.items():
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, key, _fmt(getattr(self, key)))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        kwargs = {}
        known = {(s, k) for (s, k) in _SCHEMA}
        for section in cp.sections():
            for key, raw in cp.items(section):
                if (section, key) not in known:
                    raise ValueError(f"unknown config key [{section}] {key}")
                parser = _SCHEMA[(section, key)]
                try:
                    kwargs[key] = parser(raw)
                except ValueError as e:
                    raise ValueError(f"bad value for [{section}] {key}: {e}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


def bench_config() -> RunConfig:
    """Small standard benchmark used by the ablation and acceptance runs."""
    return RunConfig()


def desk_config() -> RunConfig:
    """Larger desk-scale preset (slower; full 128x128 BEV)."""
    return RunConfig(
        range=16.0, z_min=-0.5, z_max=2.5, cell=0.25, voxel_z=0.25,
        channels=32, rpn_widths=(64, 128, 256), bottleneck_mid=64,
        fuse_channels=128, head_channels=64,
        train_sequences=4, eval_sequences=2, frames_per_sequence=25,
        objects_per_scene=6, teacher_steps=400, student_steps=300,
    )


def config_help() -> str:
    lines = ["configuration keys (INI sections):"]
    cur = None
    for (section, key), doc in KEY_DOCS.items():
        if section != cur:
            lines.append(f"  [{section}]")
            cur = section
        lines.append(f"    {key:<18} {doc}")
    return "\n".join(lines)
