"""Command-line harness.

Typical pipeline:

    mfdistill generate --out work/data --preset bench --seed 0 --jobs 4
    mfdistill fuse --sequence work/data/train --out work/fused/train --jobs 4
    mfdistill fuse --sequence work/data/eval --out work/fused/eval --jobs 4
    mfdistill pretrain-teacher --data work/data --fused work/fused --out work/teacher.smfw
    mfdistill distill-student --data work/data --fused work/fused \\
        --teacher work/teacher.smfw --out work/student.smfw
    mfdistill eval --data work/data --ckpt work/student.smfw --out work/report
    mfdistill gradcheck
    mfdistill ablate --workdir work/ablation --seeds 0,1,2 --jobs 4

Run any subcommand with -h for its flags; `--help-config` prints every
configuration key.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

from .config import RunConfig, bench_config, config_help, desk_config
from .fusion import FusionParams
from .train import (TrainResult, evaluate_model, fuse_dataset,
                    fuse_sequence_dir, generate_dataset, load_detector,
                    load_samples, save_detector, sha256_file, train_model,
                    write_manifest)


def _load_config(args) -> RunConfig:
    cfg = desk_config() if getattr(args, "preset", "bench") == "desk" else bench_config()
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    return cfg


def _add_common(p, config=True):
    if config:
        p.add_argument("--preset", choices=("bench", "desk"), default="bench",
                       help="base configuration preset")
        p.add_argument("--config", help="INI config file (overrides the preset)")
    p.add_argument("--seed", type=int, default=None, help="base seed override")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers")


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    generate_dataset(cfg, args.out, jobs=cfg.jobs)
    print(f"generated {cfg.train_sequences} train + {cfg.eval_sequences} eval "
          f"sequences under {args.out}")
    return 0


def cmd_fuse(args) -> int:
    params = FusionParams(
        group_size=args.group_size,
        voxel_size=tuple(float(v) for v in args.voxel.split(",")),
        max_per_voxel=args.max_per_voxel,
        denoise_fraction=args.denoise,
    )
    seq_dir = Path(args.sequence)
    if not seq_dir.is_dir():
        print(f"error: {seq_dir} is not a directory; run `generate` first",
              file=sys.stderr)
        return 2
    sub_seqs = sorted(d for d in seq_dir.iterdir()
                      if d.is_dir() and list(d.glob("frame_*.smff")))
    if list(seq_dir.glob("frame_*.smff")):
        fuse_sequence_dir(seq_dir, args.out, params, jobs=args.jobs or 1)
        print(f"fused {seq_dir} -> {args.out}")
    elif sub_seqs:
        for d in sub_seqs:
            fuse_sequence_dir(d, Path(args.out) / d.name, params,
                              jobs=args.jobs or 1)
            print(f"fused {d} -> {Path(args.out) / d.name}")
    else:
        print(f"error: no frame_*.smff files under {seq_dir}; run `generate` first",
              file=sys.stderr)
        return 2
    return 0


def _require(path, what: str, hint: str):
    if not Path(path).exists():
        print(f"error: missing {what} at {path}; {hint}", file=sys.stderr)
        raise SystemExit(2)


def cmd_pretrain_teacher(args) -> int:
    cfg = _load_config(args)
    _require(Path(args.data) / "train", "training data", "run `generate` first")
    fused = Path(args.fused) / "train" if cfg.teacher_mode == "multi" else None
    if fused is not None:
        _require(fused, "fused training data", "run `fuse` first")
    samples = load_samples(Path(args.data) / "train", fused)
    mode = "multi" if cfg.teacher_mode == "multi" else "single"
    result = train_model(cfg, samples, input_mode=mode, seed=cfg.seed,
                         steps=args.steps or cfg.teacher_steps,
                         progress_every=50)
    save_detector(args.out, result.detector)
    _write_log(args.out, result)
    write_manifest(str(args.out) + ".manifest.json", cfg, seeds=[cfg.seed],
                   artifacts={Path(args.out).name: sha256_file(args.out)})
    print(f"teacher checkpoint written to {args.out}")
    return 0


def cmd_distill_student(args) -> int:
    cfg = _load_config(args)
    _require(Path(args.data) / "train", "training data", "run `generate` first")
    teacher = None
    if not cfg.all_distill_disabled():
        _require(args.teacher, "teacher checkpoint", "run `pretrain-teacher` first")
        teacher = load_detector(args.teacher, cfg)
        teacher.set_requires_grad(False)
    fused = None
    if teacher is not None and cfg.teacher_mode == "multi":
        fused = Path(args.fused) / "train"
        _require(fused, "fused training data", "run `fuse` first")
    samples = load_samples(Path(args.data) / "train", fused)
    result = train_model(cfg, samples, input_mode="single", teacher=teacher,
                         seed=cfg.seed, steps=args.steps or cfg.student_steps,
                         progress_every=50)
    save_detector(args.out, result.detector, result.aux)
    _write_log(args.out, result)
    artifacts = {Path(args.out).name: sha256_file(args.out)}
    write_manifest(str(args.out) + ".manifest.json", cfg, seeds=[cfg.seed],
                   artifacts=artifacts,
                   teacher_ckpt=args.teacher if teacher is not None else None)
    print(f"student checkpoint written to {args.out}")
    return 0


def _write_log(ckpt_path, result: TrainResult):
    log_path = Path(str(ckpt_path) + ".losses.csv")
    log_path.write_text("\n".join(result.log_rows) + "\n")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _require(args.ckpt, "checkpoint", "train a model first")
    split = Path(args.data) / args.split
    _require(split, f"{args.split} data", "run `generate` first")
    fused = None
    if args.input == "multi":
        fused = Path(args.fused) / args.split
        _require(fused, "fused data", "run `fuse` first")
    samples = load_samples(split, fused)
    detector = load_detector(args.ckpt, cfg)
    report = evaluate_model(detector, samples, cfg, input_mode=args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".json").write_text(report.to_json())
    Path(str(out) + ".csv").write_text(report.to_csv())
    print(report.to_csv())
    print(f"mean AP {report.mean_ap:.4f}  mean APH {report.mean_aph:.4f}")
    print(f"report written to {out}.json / {out}.csv")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, full_suite
    results = full_suite(seed=args.seed or 0)
    print(format_report(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


ARMS = ("baseline", "voxel", "bev", "rsp", "all", "sf_teacher")


def arm_config(base: RunConfig, arm: str) -> RunConfig:
    cfg = RunConfig.from_ini(base.to_ini())   # deep copy via round trip
    cfg.enable_voxel = arm in ("voxel", "all", "sf_teacher")
    cfg.enable_bev = arm in ("bev", "all", "sf_teacher")
    cfg.enable_rsp = arm in ("rsp", "all", "sf_teacher")
    cfg.teacher_mode = "single" if arm == "sf_teacher" else "multi"
    return cfg


def run_ablation(base_cfg: RunConfig, workdir, seeds: list[int],
                 jobs: int = 1, log=print) -> dict:
    """Table-2-style grid: each arm re-trains from scratch per seed.

    Returns {arm: {"scores": [...], "mean": float}} plus teacher results.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    data_dir = workdir / "data"
    fused_dir = workdir / "fused"
    if not (data_dir / "train").is_dir():
        generate_dataset(base_cfg, data_dir, jobs=jobs)
        fuse_dataset(base_cfg, data_dir, fused_dir, jobs=jobs)
    train_s = load_samples(data_dir / "train", fused_dir / "train")
    eval_s = load_samples(data_dir / "eval", fused_dir / "eval")

    results = {arm: {"scores": []} for arm in ARMS}
    results["teacher_multi"] = {"scores": []}
    for seed in seeds:
        log(f"[seed {seed}] pretraining multi-frame teacher")
        mf = train_model(base_cfg, train_s, input_mode="multi", seed=seed,
                         steps=base_cfg.teacher_steps)
        mf.detector.set_requires_grad(False)
        rep = evaluate_model(mf.detector, eval_s, base_cfg, input_mode="multi")
        results["teacher_multi"]["scores"].append(rep.mean_aph)
        log(f"[seed {seed}] teacher mAPH {rep.mean_aph:.4f}")

        log(f"[seed {seed}] pretraining single-frame teacher (control)")
        sf = train_model(base_cfg, train_s, input_mode="single", seed=seed,
                         steps=base_cfg.teacher_steps)
        sf.detector.set_requires_grad(False)

        for arm in ARMS:
            cfg = arm_config(base_cfg, arm)
            teacher = None
            if arm != "baseline":
                teacher = sf.detector if arm == "sf_teacher" else mf.detector
            r = train_model(cfg, train_s, input_mode="single", teacher=teacher,
                            seed=seed, steps=cfg.student_steps)
            rep = evaluate_model(r.detector, eval_s, cfg)
            results[arm]["scores"].append(rep.mean_aph)
            log(f"[seed {seed}] arm {arm:<10} mAPH {rep.mean_aph:.4f}")

    for arm, r in results.items():
        r["mean"] = statistics.fmean(r["scores"])
        r["stdev"] = statistics.stdev(r["scores"]) if len(r["scores"]) > 1 else 0.0
    return results


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_ablation(cfg, args.workdir, seeds, jobs=cfg.jobs)
    out = Path(args.workdir) / "ablation.json"
    out.write_text(json.dumps(results, indent=2))
    print(f"\n{'arm':<14} {'mean mAPH':>10} {'stdev':>8}  scores")
    for arm, r in results.items():
        scores = " ".join(f"{s:.4f}" for s in r["scores"])
        print(f"{arm:<14} {r['mean']:>10.4f} {r['stdev']:>8.4f}  {scores}")
    print(f"\nresults written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfdistill",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=config_help(),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate synthetic sequences")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("fuse", help="build fused-object files for a sequence dir")
    p.add_argument("--sequence", required=True,
                   help="sequence dir (or parent of seq_* dirs)")
    p.add_argument("--out", required=True)
    p.add_argument("--group-size", type=int, default=5)
    p.add_argument("--voxel", default="0.1,0.1,0.15")
    p.add_argument("--max-per-voxel", type=int, default=5)
    p.add_argument("--denoise", type=float, default=0.005)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("pretrain-teacher", help="train the multi-frame teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_pretrain_teacher)

    p = sub.add_parser("distill-student", help="train the single-frame student")
    p.add_argument("--data", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_distill_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--fused", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--input", choices=("single", "multi"), default="single")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the ablation grid over seeds")
    p.add_argument("--workdir", required=True)
    p.add_argument("--seeds", default="0,1,2")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
