"""Command-line entry point: ``genvox <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure (with a one-line diagnostic on
stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from .checkpoint import load_checkpoint, resume_run, save_run
from .config import PRESETS, RunConfig, load_config
from .dataset import SubjectDataset, load_collection, load_subject, write_png
from .errors import ConfigError, GenvoxError
from .model import SubjectState, render_image
from .renderer import Camera, RenderConfig
from .skeleton import Pose

logger = logging.getLogger("genvox")

TRAIN_LOG_FIELDS = ("iter", "subject", "frame", "camera", "loss", "mse", "perceptual", "lambda_m", "lambda_l")


class CliError(GenvoxError):
    pass


# --------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    if args.config in PRESETS:
        cfg = PRESETS[args.config]()
    elif args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if args.seed is not None:
        cfg = cfg.replace(train=cfg.train.replace(seed=args.seed))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_subjects(cfg: RunConfig, datasets: Sequence[SubjectDataset]):
    by_id = {d.subject_id: d for d in datasets}
    target = cfg.data.target if cfg.data.target is not None else datasets[-1].subject_id
    if target not in by_id:
        raise ConfigError(f"target subject {target!r} not in dataset (have {sorted(by_id)})")
    if cfg.data.pretrain_subjects is None:
        pre = [d for d in datasets if d.subject_id != target]
    else:
        missing = [s for s in cfg.data.pretrain_subjects if s not in by_id]
        if missing:
            raise ConfigError(f"pretrain subjects {missing} not in dataset")
        pre = [by_id[s] for s in cfg.data.pretrain_subjects]
    return pre, by_id[target]


def _target_dataset(cfg: RunConfig, subject_id: Optional[str] = None) -> SubjectDataset:
    root = Path(cfg.data.root)
    if subject_id is not None and (root / f"subject_{subject_id}").exists():
        return load_subject(root / f"subject_{subject_id}")
    return _split_subjects(cfg, load_collection(root))[1]


def _require_checkpoint(path) -> Path:
    if not path or not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    return Path(path)


def _run_training(tr, cfg: RunConfig, out: Path, eval_set: Optional[SubjectDataset] = None) -> None:
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    log_path = out / "train_log.csv"
    new = not log_path.exists()
    fh = open(log_path, "a")
    if new:
        fh.write(",".join(TRAIN_LOG_FIELDS) + "\n")

    def callback(run, rec):
        fh.write(f"{rec.iteration},{rec.subject},{rec.frame},{rec.camera},{rec.loss!r},{rec.mse!r},"
                 f"{rec.perceptual!r},{rec.lambda_m},{rec.lambda_l}\n")
        done = run.iteration
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < run.config.iterations:
            save_run(run, out / f"checkpoint_{done:06d}.gnvx")
        if eval_set is not None and cfg.eval_every and done % cfg.eval_every == 0:
            _evaluate(run.shared, run.subjects[0], eval_set, cfg, out, done)

    t0 = time.time()
    try:
        tr.run(callback=callback, log_every=cfg.log_every)
    finally:
        fh.close()
    path = save_run(tr, out / "checkpoint_final.gnvx")
    logger.info("%s finished at iteration %d in %.1fs; wrote %s", tr.config.phase, tr.iteration,
                time.time() - t0, path)


def _evaluate(shared, subject, ds, cfg: RunConfig, out: Path, iteration: int, split: str = "eval",
              stride: int = 1):
    from .trainer import evaluate

    views = [(f, c) for f, c in (ds.eval if split == "eval" else ds.train) if f % stride == 0]
    res = evaluate(shared, subject, ds, split, cfg.eval_samples, iteration, views)
    res.write_csv(out / "metrics.csv")
    logger.info("eval iter %d psnr %.3f ssim %.4f", iteration, res.summary["psnr"], res.summary["ssim"])
    return res


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .synthdata import generate_dataset, make_subjects

    root = Path(args.out) if args.out else Path(cfg.data.root)
    seed = cfg.data.seed if args.seed is None else args.seed
    subjects = make_subjects(cfg.data.subjects, seed)
    generate_dataset(subjects, cfg.data.frames, cfg.data.cameras, out_dir=root, image_size=cfg.data.image_size)
    print(f"wrote {len(subjects)} subjects to {root}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .trainer import pretrain

    out = _out_dir(cfg)
    pre, _ = _split_subjects(cfg, load_collection(cfg.data.root))
    if args.resume:
        tr = resume_run(_require_checkpoint(args.resume), pre)
    else:
        model = cfg.model_config([d.skeleton for d in pre])
        tr = pretrain(pre, cfg.train, model, run=False)
    _run_training(tr, cfg, out)
    return 0


def _single_subject(args, cfg: RunConfig, phase: str) -> int:
    from .trainer import prepare_finetune

    out = _out_dir(cfg)
    datasets = load_collection(cfg.data.root)
    _, target = _split_subjects(cfg, datasets)
    train = cfg.train.replace(phase=phase)
    if args.resume:
        tr = resume_run(_require_checkpoint(args.resume), [target], train)
    elif phase == "finetune":
        path = _require_checkpoint(args.pretrained or cfg.pretrained)
        ck = load_checkpoint(path)
        mask = args.load_mask if args.load_mask is not None else cfg.load_mask
        tr = prepare_finetune(ck.shared, target, train, ck.model, mask)
    else:
        model = cfg.model_config([d.skeleton for d in datasets])
        tr = prepare_finetune(None, target, train, model, ())
    _run_training(tr, cfg, out, target if cfg.eval_every else None)
    return 0


def cmd_finetune(args, cfg):
    return _single_subject(args, cfg, "finetune")


def cmd_scratch(args, cfg):
    return _single_subject(args, cfg, "scratch")


def _view(args, cfg: RunConfig, ck, index: int):
    """(subject state, pose, camera, timestamp) for the requested view."""
    if not 0 <= index < len(ck.subjects):
        raise CliError(f"checkpoint has {len(ck.subjects)} subjects; no index {index}")
    subject = ck.subjects[index]
    if args.pose_file:
        doc = json.loads(Path(args.pose_file).read_text())
        pose = Pose(doc["omega"], doc.get("root_translation", (0.0, 0.0, 0.0)))
        cam = Camera.from_dict(doc["camera"])
        t = float(doc.get("timestamp", 0.0))
    else:
        ds = _target_dataset(cfg, subject.subject_id)
        if not 0 <= args.frame < len(ds.frames) or not 0 <= args.camera < len(ds.cameras):
            raise CliError(f"no frame {args.frame} / camera {args.camera} in subject {ds.subject_id!r}")
        rec = ds.frames[args.frame]
        pose, cam, t = rec.pose, ds.cameras[args.camera], rec.timestamp
    if args.time is not None:
        t = args.time
    return subject, pose, cam, t


def cmd_render(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(_require_checkpoint(args.checkpoint))
    subject, pose, cam, t = _view(args, cfg, ck, args.subject)
    img = render_image(ck.shared, subject, pose, cam, t, RenderConfig(n_samples=args.samples, stratified=False))
    path = Path(args.png) if args.png else _out_dir(cfg) / "render.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_png(path, img)
    print(f"wrote {path}")
    return 0


def zero_other(shared, subject: SubjectState, which: str):
    """Copies of the states with the grid not named by ``which`` zeroed."""
    shared, subject = shared.copy(), subject.copy()
    if which == "general":
        subject.store.params["individual_voxels"][...] = 0
    elif which == "individual":
        shared.store.params["general_voxels"][...] = 0
    else:
        raise ConfigError(f"which must be 'general' or 'individual', got {which!r}")
    return shared, subject


def cmd_inspect_voxels(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(_require_checkpoint(args.checkpoint))
    subject, pose, cam, t = _view(args, cfg, ck, args.subject)
    rc = RenderConfig(n_samples=args.samples, stratified=False)
    out = Path(args.png).parent if args.png else _out_dir(cfg)
    kinds = ["general", "individual"] if args.which == "both" else [args.which]
    for which in kinds:
        sh, su = zero_other(ck.shared, subject, which)
        path = Path(args.png) if args.png and len(kinds) == 1 else out / f"voxels_{which}.png"
        write_png(path, render_image(sh, su, pose, cam, t, rc))
        print(f"wrote {path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(_require_checkpoint(args.checkpoint))
    if not 0 <= args.subject < len(ck.subjects):
        raise CliError(f"checkpoint has {len(ck.subjects)} subjects; no index {args.subject}")
    subject = ck.subjects[args.subject]
    ds = _target_dataset(cfg, subject.subject_id)
    if args.samples:
        cfg = cfg.replace(eval_samples=args.samples)
    res = _evaluate(ck.shared, subject, ds, cfg, _out_dir(cfg), ck.iteration, args.split, args.frame_stride)
    print(json.dumps(res.summary))
    return 0


def cmd_check_grads(args, cfg: RunConfig) -> int:
    from .gradcheck import BLOCKS, run_suite

    blocks = args.blocks or list(BLOCKS)
    unknown = sorted(set(blocks) - set(BLOCKS))
    if unknown:
        raise ConfigError(f"unknown blocks {unknown}; choose from {sorted(BLOCKS)}")
    start = 0 if args.seed is None else args.seed
    t0 = time.time()
    reports = run_suite(range(start, start + args.seeds), blocks, args.tol)
    failed = [r for r in reports if not r.passed]
    worst = max(r.max_rel_err for r in reports)
    print(f"{len(reports)} checks, {len(failed)} failed, worst relative error {worst:.2e}, {time.time() - t0:.1f}s")
    for r in failed:
        print(f"FAIL {r.block}: {r.max_rel_err:.2e} at {r.worst}")
    return 1 if failed else 0


def cmd_benchmark(args, cfg: RunConfig) -> int:
    from .benchmark import BenchmarkConfig, run_benchmark

    bc = BenchmarkConfig(seed=cfg.train.seed)
    res = run_benchmark(bc)
    out = _out_dir(cfg) / "benchmark.json"
    out.write_text(json.dumps(res.to_dict(), indent=1))
    print(json.dumps(res.to_dict(), indent=1))
    return 0


# --------------------------------------------------------------------------
# parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="run config JSON, or a preset name: " + ", ".join(PRESETS),
                   **(d or {"default": None}))
    p.add_argument("--seed", type=int, help="training seed (gen-data: subject seed; check-grads: first seed)",
                   **(d or {"default": None}))
    p.add_argument("--out", help="output directory (gen-data: dataset root)", **(d or {"default": None}))
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics so repeated runs agree bitwise", **d)
    p.add_argument("-v", "--verbose", action="store_true", **d)


def _view_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject", type=int, default=0, help="subject index inside the checkpoint")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--time", type=float, default=None, help="override the frame timestamp")
    p.add_argument("--pose-file", default=None, help="JSON with omega, root_translation, timestamp, camera")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--png", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genvox", description="Generalizable neural voxels for articulated bodies.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "render the synthetic capsule-body dataset")
    p = add("pretrain", cmd_pretrain, "train shared modules across several subjects")
    p.add_argument("--resume", default=None, help="continue from a checkpoint written by a training command")
    p = add("finetune", cmd_finetune, "adapt pretrained shared modules to the target subject")
    p.add_argument("--pretrained", default=None)
    p.add_argument("--load-mask", nargs="*", default=None, help="shared components to load (rest re-initialized)")
    p.add_argument("--resume", default=None)
    p = add("scratch", cmd_scratch, "train the target subject from random initialization")
    p.add_argument("--resume", default=None)
    _view_flags(add("render", cmd_render, "render one view from a checkpoint to PNG"))
    p = add("inspect-voxels", cmd_inspect_voxels, "render general or individual voxels alone")
    p.add_argument("which", choices=("general", "individual", "both"))
    _view_flags(p)
    p = add("eval", cmd_eval, "score held-out views and append to metrics.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--frame-stride", type=int, default=1)
    p = add("check-grads", cmd_check_grads, "finite-difference check of every differentiable block")
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    p.add_argument("--blocks", nargs="*", default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    add("benchmark", cmd_benchmark, "pretrain / fine-tune / scratch transfer experiment")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    ctx = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(1)
    try:
        cfg = _config(args)
        with ctx:
            return args.func(args, cfg)
    except (GenvoxError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
