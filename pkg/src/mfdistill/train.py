"""Training loops and pipeline stages.

Stage order: generate -> fuse -> pretrain teacher -> distill student -> eval.
The teacher trains on assembled multi-frame clouds (frame + cached fused
objects) and is frozen afterwards; the student trains on single frames with
the supervised loss plus whatever distillation terms are enabled.

One code path trains everything: a teacherless run with all distillation
switches off is exactly plain supervised training, which is also what makes
the zero-weight degenerate configuration bit-identical to the baseline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, cosine_lr
from .backbone import (Detector, build_gt_heatmap, build_gt_regression,
                       decode_detections, supervised_loss)
from .config import RunConfig
from .distill import DistillBreakdown, StudentAux, distill_losses, total_loss
from .evaluate import EvalReport, FrameResult, evaluate
from .fusion import (FrameSequence, assemble_multiframe, fuse_frame,
                     read_fused_file, write_fused_file)
from .geom import BoundingBox3D, PointCloud, points_in_box
from .synth import (CLASS_NAMES, generate_sequence, random_scene_spec,
                    read_sequence, write_sequence)

log = logging.getLogger(__name__)

LOG_COLUMNS = "step,L_cls,L_reg,L_vxl,L_bev,L_rsp_c,L_rsp_r,total,lr"


@dataclass
class TrainSample:
    cloud: PointCloud                      # single frame
    boxes: list[BoundingBox3D]
    multi_cloud: PointCloud | None         # assembled, when fused data exists
    gt_point_counts: list[int]             # single-frame in-box counts


# --- dataset stages -----------------------------------------------------------------

def _gen_one_sequence(args):
    cfg_seed, seq_index, frames, objects, extent, out_dir = args
    spec = random_scene_spec(seed=cfg_seed + 1000 * seq_index,
                             num_frames=frames, num_objects=objects,
                             extent=extent)
    seq = generate_sequence(spec)
    write_sequence(seq, Path(out_dir) / f"seq_{seq_index:03d}")
    return seq_index


def generate_dataset(cfg: RunConfig, data_dir, jobs: int = 1):
    """Write train/ and eval/ sequence directories under data_dir."""
    data_dir = Path(data_dir)
    tasks = []
    extent = 0.85 * cfg.range
    for i in range(cfg.train_sequences):
        tasks.append((cfg.seed, i, cfg.frames_per_sequence,
                      cfg.objects_per_scene, extent, data_dir / "train"))
    for i in range(cfg.eval_sequences):
        tasks.append((cfg.seed, 10_000 + i, cfg.frames_per_sequence,
                      cfg.objects_per_scene, extent, data_dir / "eval"))
    _run_parallel(_gen_one_sequence, tasks, jobs)


_FUSE_SEQ: FrameSequence | None = None
_FUSE_PARAMS = None


def _fuse_init(seq, params):
    global _FUSE_SEQ, _FUSE_PARAMS
    _FUSE_SEQ = seq
    _FUSE_PARAMS = params


def _fuse_one_frame(args):
    frame_pos, out_path = args
    objs = fuse_frame(_FUSE_SEQ, frame_pos, _FUSE_PARAMS)
    write_fused_file(objs, out_path)
    return frame_pos


def fuse_sequence_dir(seq_dir, out_dir, params, jobs: int = 1):
    """Fuse every frame of one sequence directory into fused_*.smfb files."""
    seq = read_sequence(seq_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(pos, out / f"fused_{seq.frames[pos].frame_index:05d}.smfb")
             for pos in range(len(seq))]
    if jobs <= 1:
        _fuse_init(seq, params)
        for t in tasks:
            _fuse_one_frame(t)
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(jobs, initializer=_fuse_init, initargs=(seq, params)) as pool:
            list(pool.imap_unordered(_fuse_one_frame, tasks))


def fuse_dataset(cfg: RunConfig, data_dir, fused_dir, jobs: int = 1):
    data_dir, fused_dir = Path(data_dir), Path(fused_dir)
    for split in ("train", "eval"):
        split_dir = data_dir / split
        if not split_dir.is_dir():
            continue
        for seq_dir in sorted(split_dir.iterdir()):
            if seq_dir.is_dir():
                fuse_sequence_dir(seq_dir, fused_dir / split / seq_dir.name,
                                  cfg.fusion_params(), jobs)


def _run_parallel(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        for t in tasks:
            fn(t)
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(min(jobs, len(tasks))) as pool:
            list(pool.imap_unordered(fn, tasks))


def load_samples(data_split_dir, fused_split_dir=None) -> list[TrainSample]:
    """Read sequence dirs (sorted) into training samples; when a fused dir
    is given, also assemble the multi-frame cloud per frame."""
    data_split_dir = Path(data_split_dir)
    samples = []
    seq_dirs = sorted(d for d in data_split_dir.iterdir() if d.is_dir())
    if not seq_dirs:
        raise FileNotFoundError(f"no sequence directories in {data_split_dir}")
    for seq_dir in seq_dirs:
        seq = read_sequence(seq_dir)
        for pos in range(len(seq)):
            cloud = seq.frames[pos]
            boxes = seq.annotations[pos]
            multi = None
            if fused_split_dir is not None:
                fpath = (Path(fused_split_dir) / seq_dir.name
                         / f"fused_{cloud.frame_index:05d}.smfb")
                if not fpath.is_file():
                    raise FileNotFoundError(
                        f"missing fused file {fpath}; run the fuse command first")
                fused = read_fused_file(fpath)
                multi = assemble_multiframe(cloud, fused, boxes)
            counts = [len(points_in_box(cloud, b)) for b in boxes]
            samples.append(TrainSample(cloud, boxes, multi, counts))
    return samples


# --- training -------------------------------------------------------------------------

def _step_order(n: int, steps: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    order: list[int] = []
    while len(order) < steps:
        order.extend(rng.permutation(n).tolist())
    return order[:steps]


@dataclass
class TrainResult:
    detector: Detector
    aux: StudentAux | None
    log_rows: list[str]


def train_model(cfg: RunConfig, samples: list[TrainSample], *,
                input_mode: str = "single",
                teacher: Detector | None = None,
                seed: int = 0, steps: int | None = None,
                lr_max: float | None = None,
                progress_every: int = 0) -> TrainResult:
    """Train a detector; distillation terms apply when a teacher is given
    and the corresponding config switches are on."""
    det_cfg = cfg.detector_config()
    weights = cfg.distill_weights()
    steps = cfg.student_steps if steps is None else steps
    lr_max = cfg.lr_max if lr_max is None else lr_max

    detector = Detector(det_cfg, seed=seed)
    use_distill = teacher is not None and not cfg.all_distill_disabled()
    aux = StudentAux(det_cfg, seed=seed) if teacher is not None else None
    params = detector.named_params()
    if aux is not None:
        params = {**params, **aux.named_params()}
    opt = SGD(params, momentum=cfg.momentum, clip_norm=cfg.grad_clip)

    order = _step_order(len(samples), steps, seed=seed + 0x5EED)
    rows = [LOG_COLUMNS]
    zero = Tensor(np.zeros(()))
    for step in range(steps):
        sample = samples[order[step]]
        cloud = _input_cloud(sample, input_mode)
        out = detector.forward(cloud)
        gt_hm = build_gt_heatmap(sample.boxes, det_cfg)
        gt_reg, centers = build_gt_regression(sample.boxes, det_cfg)
        _, l_cls, l_reg = supervised_loss(out.heatmap, out.reg, gt_hm, gt_reg,
                                          centers, alpha=weights.alpha)
        if use_distill:
            t_cloud = sample.multi_cloud if cfg.teacher_mode == "multi" else sample.cloud
            if t_cloud is None:
                raise FileNotFoundError(
                    "teacher_mode=multi needs fused data; run the fuse command first")
            t_out = teacher.forward(t_cloud)
            breakdown = distill_losses(out, t_out, aux, sample.boxes, gt_hm,
                                       centers, weights,
                                       enable_voxel=cfg.enable_voxel,
                                       enable_bev=cfg.enable_bev,
                                       enable_rsp=cfg.enable_rsp)
        else:
            breakdown = DistillBreakdown(zero, zero, zero, zero, 0)
        ramp = 1.0
        if use_distill and cfg.warmup_steps > 0:
            ramp = min(1.0, (step + 1) / cfg.warmup_steps)
        loss = total_loss(l_cls, l_reg, breakdown, weights, ramp)
        opt.zero_grad()
        ad.backward(loss)
        lr = cosine_lr(step, steps, lr_max)
        opt.step(lr)
        rows.append(
            f"{step},{l_cls.item():.6f},{l_reg.item():.6f},"
            f"{breakdown.l_vxl.item():.6f},{breakdown.l_bev.item():.6f},"
            f"{breakdown.l_rsp_c.item():.6f},{breakdown.l_rsp_r.item():.6f},"
            f"{loss.item():.6f},{lr:.6f}")
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d/%d loss %.4f", step + 1, steps, loss.item())
    return TrainResult(detector, aux, rows)


def _input_cloud(sample: TrainSample, input_mode: str) -> PointCloud:
    if input_mode == "single":
        return sample.cloud
    if input_mode == "multi":
        if sample.multi_cloud is None:
            raise FileNotFoundError(
                "multi-frame input requested but no fused data was loaded; "
                "run the fuse command first")
        return sample.multi_cloud
    raise ValueError(f"unknown input mode {input_mode!r}")


def evaluate_model(detector: Detector, samples: list[TrainSample],
                   cfg: RunConfig, input_mode: str = "single") -> EvalReport:
    """Decode every frame and score; detector runs tape-free."""
    detector.set_requires_grad(False)
    frames = []
    for sample in samples:
        cloud = _input_cloud(sample, input_mode)
        out = detector.forward(cloud)
        dets = decode_detections(out.heatmap.data, out.reg.data, detector.config)
        frames.append(FrameResult(dets, sample.boxes, sample.gt_point_counts))
    detector.set_requires_grad(True)
    return evaluate(frames, cfg.iou_thresholds(), cfg.distance_bands(),
                    cfg.iou_mode, CLASS_NAMES)


# --- artifacts --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_hash() -> str | None:
    import subprocess
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() if out.returncode == 0 else None
    except OSError:
        return None


def write_manifest(path, cfg: RunConfig, *, seeds: list[int],
                   artifacts: dict[str, str], teacher_ckpt=None):
    manifest = {
        "config_ini": cfg.to_ini(),
        "seeds": seeds,
        "git_hash": git_hash(),
        "artifact_sha256": artifacts,
    }
    if teacher_ckpt is not None:
        manifest["teacher_checkpoint_sha256"] = sha256_file(teacher_ckpt)
    Path(path).write_text(json.dumps(manifest, indent=2))


def save_detector(path, detector: Detector, aux: StudentAux | None = None):
    params = detector.named_params()
    if aux is not None:
        params = {**params, **aux.named_params()}
    ad.save_checkpoint(path, params)


def load_detector(path, cfg: RunConfig) -> Detector:
    det = Detector(cfg.detector_config(), seed=0)
    det.load(ad.load_checkpoint(path))
    return det
