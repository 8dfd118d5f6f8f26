"""Desk-scale transfer benchmark: pretrain on several synthetic bodies, then
compare fine-tuning against training from scratch on a held-out body, and
fine-tuning with individual shared components re-initialized.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import LearningRates
from .dataset import SubjectDataset
from .model import SHARED_COMPONENTS, ModelConfig, canonical_aabb
from .renderer import RenderConfig
from .synthdata import generate_dataset, make_subjects
from .trainer import TrainConfig, TrainingRun, evaluate, prepare_finetune, pretrain

logger = logging.getLogger(__name__)


def desk_model_config(skeletons, **overrides) -> ModelConfig:
    """Small enough for a single CPU core: 40^3 voxels and a narrow blend-weight
    decoder; samples farther than 0.25 from every bone are skipped."""
    lo, hi = canonical_aabb(skeletons, pad=0.15)
    kw = dict(aabb_min=lo, aabb_max=hi, voxel_dims=(40, 40, 40), weight_expand=256,
              weight_channels=(32, 16, 8), cull_radius=0.25)
    kw.update(overrides)
    return ModelConfig(**kw)


def desk_render_config() -> RenderConfig:
    return RenderConfig(n_samples=32, patch_count=4, patch_size=16)


@dataclass
class BenchmarkConfig:
    subjects: int = 5
    frames: int = 20
    cameras: int = 4
    image_size: int = 64
    data_seed: int = 0
    seed: int = 0
    pretrain_iters: int = 3000
    scratch_iters: int = 2000
    finetune_iters: int = 1000
    ablation_iters: int = 500
    early_checkpoints: Tuple[int, ...] = (100, 200, 300, 400, 500)
    finetune_every: int = 100
    eval_frame_stride: int = 4
    eval_samples: int = 32
    ablations: Tuple[str, ...] = ("general_voxels", "radiance")


@dataclass
class BenchmarkResult:
    scratch_psnr: Dict[int, float] = field(default_factory=dict)
    finetune_psnr: Dict[int, float] = field(default_factory=dict)
    ablation_psnr: Dict[str, float] = field(default_factory=dict)
    start_loss: Dict[str, float] = field(default_factory=dict)
    seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def target_psnr(self) -> float:
        return self.scratch_psnr[max(self.scratch_psnr)]

    def steps_to_target(self) -> Optional[int]:
        for it in sorted(self.finetune_psnr):
            if self.finetune_psnr[it] >= self.target_psnr:
                return it
        return None

    def to_dict(self) -> dict:
        return {
            "scratch_psnr": self.scratch_psnr, "finetune_psnr": self.finetune_psnr,
            "ablation_psnr": self.ablation_psnr, "start_loss": self.start_loss, "seconds": self.seconds,
            "target_psnr": self.target_psnr, "steps_to_target": self.steps_to_target(),
        }


def eval_views(ds: SubjectDataset, stride: int) -> List[Tuple[int, int]]:
    return [(f, c) for f, c in ds.eval if f % stride == 0]


def _train_with_evals(tr: TrainingRun, ds: SubjectDataset, checkpoints: Sequence[int], views, n_samples) -> Dict[int, float]:
    out = {}
    for it in sorted(checkpoints):
        tr.run(it - tr.iteration, log_every=0)
        ev = evaluate(tr.shared, tr.subjects[0], ds, views=views, n_samples=n_samples, iteration=it)
        out[it] = ev.psnr
        logger.info("%s step %d eval psnr %.3f", tr.config.phase, it, ev.psnr)
    return out


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), datasets: Optional[List[SubjectDataset]] = None,
                  out_dir=None) -> BenchmarkResult:
    res = BenchmarkResult()
    t0 = time.time()
    if datasets is None:
        subjects = make_subjects(cfg.subjects, cfg.data_seed)
        datasets = generate_dataset(subjects, cfg.frames, cfg.cameras, out_dir=out_dir, image_size=cfg.image_size)
    res.seconds["data"] = time.time() - t0
    train_sets, held_out = datasets[:-1], datasets[-1]
    model = desk_model_config([d.skeleton for d in train_sets])
    base = TrainConfig(iterations=cfg.pretrain_iters, seed=cfg.seed, render=desk_render_config())
    views = eval_views(held_out, cfg.eval_frame_stride)

    t = time.time()
    pre = pretrain(train_sets, base, model)
    res.seconds["pretrain"] = time.time() - t
    shared = pre.shared

    t = time.time()
    sc = prepare_finetune(None, held_out, base.replace(phase="scratch", iterations=cfg.scratch_iters), model, ())
    res.start_loss["scratch"] = _first_loss(sc)
    res.scratch_psnr = _train_with_evals(sc, held_out, set(cfg.early_checkpoints) | {cfg.scratch_iters}, views,
                                         cfg.eval_samples)
    res.seconds["scratch"] = time.time() - t

    t = time.time()
    ft = prepare_finetune(shared, held_out, base.replace(phase="finetune", iterations=cfg.finetune_iters), model)
    res.start_loss["finetune"] = _first_loss(ft)
    marks = set(range(cfg.finetune_every, cfg.finetune_iters + 1, cfg.finetune_every)) | set(cfg.early_checkpoints)
    res.finetune_psnr = _train_with_evals(ft, held_out, marks, views, cfg.eval_samples)
    res.seconds["finetune"] = time.time() - t

    res.ablation_psnr["all"] = res.finetune_psnr[cfg.ablation_iters]
    for drop in cfg.ablations:
        t = time.time()
        mask = tuple(c for c in SHARED_COMPONENTS if c != drop)
        ab = prepare_finetune(shared, held_out, base.replace(phase="finetune", iterations=cfg.ablation_iters),
                              model, mask)
        res.ablation_psnr["no_" + drop] = _train_with_evals(ab, held_out, [cfg.ablation_iters], views,
                                                            cfg.eval_samples)[cfg.ablation_iters]
        res.seconds["ablation_" + drop] = time.time() - t
    res.seconds["total"] = time.time() - t0
    return res


def _first_loss(tr: TrainingRun) -> float:
    """Photometric error of the untrained state on the first training draw,
    measured on a copy so the run itself is untouched."""
    probe = TrainingRun(tr.shared.copy(), [s.copy() for s in tr.subjects], tr.datasets,
                        tr.config.replace(rates=LearningRates(0.0, 0.0, 0.0)),
                        rng=np.random.default_rng(tr.config.seed))
    return probe.step().mse


def main(path: str = "benchmark.json") -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_benchmark()
    Path(path).write_text(json.dumps(res.to_dict(), indent=1))
    print(json.dumps(res.to_dict(), indent=1))


if __name__ == "__main__":
    import sys

    main(*sys.argv[1:])
