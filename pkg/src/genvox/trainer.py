"""Multi-subject pretraining, per-subject fine-tuning, scratch training and evaluation.

A :class:`TrainingRun` owns everything a step mutates (parameters, Adam
moments, the random stream, the iteration counter), so a run saved with
:mod:`genvox.checkpoint` resumes exactly where it stopped.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import AdamState, LearningRates, adam_step
from .dataset import SubjectDataset
from .errors import ConfigError, IncompatibleCheckpointError, NonFiniteError
from .losses import PHASES, LossWeights, PerceptualNet, mse_loss, mse_loss_vjp, perceptual_loss, \
    perceptual_loss_vjp, psnr, ssim
from .model import SHARED_COMPONENTS, FrameInput, ModelConfig, RenderPass, SharedState, SubjectState, \
    accumulate, render_image
from .renderer import RenderConfig, sample_patches

logger = logging.getLogger(__name__)

SCHEDULES = ("round_robin", "random")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    iterations: int = 3000
    seed: int = 0
    rates: LearningRates = field(default_factory=LearningRates)
    loss: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    schedule: str = "round_robin"
    perceptual_seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if min(self.rates.base, self.rates.voxels, self.rates.radiance) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown subject schedule {self.schedule!r}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        r = self.render
        return {
            "phase": self.phase, "iterations": self.iterations, "seed": self.seed,
            "rates": dataclasses.asdict(self.rates), "loss": dataclasses.asdict(self.loss),
            "render": {"n_samples": r.n_samples, "patch_count": r.patch_count, "patch_size": r.patch_size,
                       "background": [float(v) for v in r.background], "stratified": r.stratified},
            "schedule": self.schedule, "perceptual_seed": self.perceptual_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        try:
            if "rates" in d:
                d["rates"] = LearningRates(**d["rates"])
            if "loss" in d:
                d["loss"] = LossWeights(**d["loss"])
            if "render" in d:
                d["render"] = RenderConfig(**d["render"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc


@dataclass
class StepRecord:
    iteration: int
    subject: int
    frame: int
    camera: int
    loss: float
    mse: float
    perceptual: float
    lambda_m: float
    lambda_l: float


def _first_nonfinite(named: Iterable[Tuple[str, np.ndarray]]) -> Optional[str]:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def train_step(shared: SharedState, subject: SubjectState, dataset: SubjectDataset, view: Tuple[int, int],
               config: TrainConfig, rng: np.random.Generator, iteration: int, adam_shared: AdamState,
               adam_subject: AdamState, perceptual: PerceptualNet, subject_index: int = 0) -> StepRecord:
    """One optimization step on one training image; updates both stores in place.

    G patches are drawn from the image, their rays rendered, the scheduled
    loss back-propagated through the whole pipeline, and Adam applied with
    group-wise rates.
    """
    f, c = view
    cam = dataset.cameras[c]
    rec = dataset.frames[f]
    img = dataset.image(f, c)
    rc = config.render
    patches = sample_patches(cam.width, cam.height, rc.patch_count, rc.patch_size, rng)
    pixels = patches.reshape(-1, 2)
    rp = RenderPass(shared, subject, FrameInput(rec.pose, rec.timestamp, cam), pixels, rc, rng)
    shape = patches.shape[:3] + (3,)
    pred = rp.pixels.reshape(shape)
    gt = img[patches[..., 1], patches[..., 0]].astype(pred.dtype)

    lm, ll = config.loss.coefficients(config.phase, iteration)
    mse, mse_pb = mse_loss_vjp(pred, gt)
    perc, perc_pb = perceptual_loss_vjp(pred, gt, perceptual) if ll > 0 else (perceptual_loss(pred, gt, perceptual), None)
    loss = lm * mse + ll * perc
    if not np.isfinite(loss):
        bad = _first_nonfinite(list(shared.store.items()) + list(subject.store.items()) + [("rendered pixels", pred)])
        raise NonFiniteError(f"non-finite loss at iteration {iteration}; first non-finite tensor: {bad or 'loss'}")

    g = lm * mse_pb(1.0)
    if perc_pb is not None:
        g = g + ll * perc_pb(1.0)
    grads = rp.backward(g.reshape(-1, 3))
    bad = _first_nonfinite(grads.items())
    if bad is not None:
        raise NonFiniteError(f"non-finite gradient at iteration {iteration} in {bad!r}")

    shared.store.zero_grads()
    subject.store.zero_grads()
    accumulate(grads, shared, subject)
    lr = config.rates.resolver(iteration)
    adam_step(shared.store, adam_shared, lr)
    adam_step(subject.store, adam_subject, lr)
    return StepRecord(iteration, subject_index, f, c, float(loss), float(mse), float(perc), lm, ll)


class TrainingRun:
    """Mutable training state for one or more subjects sharing one :class:`SharedState`.

    Shared parameters have one Adam state; each subject has its own, which
    persists across its turns in the subject schedule.
    """

    def __init__(self, shared: SharedState, subjects: Sequence[SubjectState], datasets: Sequence[SubjectDataset],
                 config: TrainConfig, rng: Optional[np.random.Generator] = None,
                 adam_shared: Optional[AdamState] = None, adam_subjects: Optional[Sequence[AdamState]] = None,
                 iteration: int = 0):
        if len(subjects) != len(datasets) or not subjects:
            raise ConfigError("need one dataset per subject state")
        for ds in datasets:
            if not ds.frames or not ds.train:
                raise ConfigError(f"subject {ds.subject_id!r} has no training frames")
        self.shared = shared
        self.subjects = list(subjects)
        self.datasets = list(datasets)
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.adam_shared = adam_shared or AdamState()
        self.adam_subjects = list(adam_subjects) if adam_subjects is not None else [AdamState() for _ in subjects]
        self.iteration = iteration
        self.history: List[StepRecord] = []
        self.perceptual = PerceptualNet.random(config.perceptual_seed)
        if config.render.patch_size < self.perceptual.receptive_field:
            raise ConfigError("patch size smaller than the perceptual net's receptive field")

    def next_subject(self) -> int:
        n = len(self.subjects)
        if self.config.schedule == "round_robin":
            return self.iteration % n
        return int(self.rng.integers(n))

    def step(self) -> StepRecord:
        s = self.next_subject()
        ds = self.datasets[s]
        view = ds.train[int(self.rng.integers(len(ds.train)))]
        rec = train_step(self.shared, self.subjects[s], ds, view, self.config, self.rng, self.iteration,
                         self.adam_shared, self.adam_subjects[s], self.perceptual, s)
        self.iteration += 1
        self.history.append(rec)
        return rec

    def run(self, steps: Optional[int] = None, callback: Optional[Callable[["TrainingRun", StepRecord], None]] = None,
            log_every: int = 100) -> List[StepRecord]:
        """Run ``steps`` more iterations (default: up to ``config.iterations``)."""
        steps = self.config.iterations - self.iteration if steps is None else steps
        out = []
        for _ in range(max(steps, 0)):
            rec = self.step()
            out.append(rec)
            if log_every and rec.iteration % log_every == 0:
                logger.info("%s iter %d subject %d loss %.5f mse %.5f", self.config.phase, rec.iteration,
                            rec.subject, rec.loss, rec.mse)
            if callback is not None:
                callback(self, rec)
        return out


def pretrain(datasets: Sequence[SubjectDataset], config: TrainConfig, model: ModelConfig,
             run: bool = True) -> TrainingRun:
    """Jointly train shared modules across subjects, each with its own individual state."""
    if len(datasets) < 2:
        raise ConfigError("pretraining needs at least two subjects")
    config = config.replace(phase="pretrain")
    shared = SharedState.create(model, config.seed)
    subjects = [SubjectState.create(model, ds.skeleton, ds.subject_id) for ds in datasets]
    tr = TrainingRun(shared, subjects, datasets, config)
    if run:
        tr.run()
    return tr


def check_compatible(pretrained: SharedState, model: ModelConfig) -> None:
    """Raise :class:`IncompatibleCheckpointError` naming every shared component whose
    parameter shapes differ from what ``model`` builds."""
    template = SharedState.create(model, 0)
    bad = []
    for comp in SHARED_COMPONENTS:
        want = {n: template.store[n].shape for n in template.component_names(comp)}
        have = {n: pretrained.store[n].shape for n in pretrained.component_names(comp)}
        if want != have:
            bad.append(comp)
    if bad:
        raise IncompatibleCheckpointError(f"pretrained state incompatible with model config in: {', '.join(bad)}")


def prepare_finetune(pretrained: Optional[SharedState], dataset: SubjectDataset, config: TrainConfig,
                     model: Optional[ModelConfig] = None, load_mask: Iterable[str] = SHARED_COMPONENTS) -> TrainingRun:
    """Fresh zero subject state plus shared modules: components in ``load_mask`` copy
    the pretrained values, the rest are re-initialized from ``config.seed``.
    ``pretrained`` is only read."""
    load_mask = tuple(load_mask)
    unknown = set(load_mask) - set(SHARED_COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown load_mask components {sorted(unknown)}; choose from {SHARED_COMPONENTS}")
    if model is None:
        if pretrained is None:
            raise ConfigError("need a model config when nothing is loaded")
        model = pretrained.config
    shared = SharedState.create(model, config.seed)
    if load_mask:
        if pretrained is None:
            raise ConfigError("load_mask is non-empty but no pretrained state was given")
        check_compatible(pretrained, model)
        for comp in load_mask:
            for name in shared.component_names(comp):
                np.copyto(shared.store.params[name], pretrained.store[name])
    subject = SubjectState.create(model, dataset.skeleton, dataset.subject_id)
    return TrainingRun(shared, [subject], [dataset], config)


def finetune(pretrained: SharedState, dataset: SubjectDataset, config: TrainConfig,
             load_mask: Iterable[str] = SHARED_COMPONENTS, model: Optional[ModelConfig] = None) -> TrainingRun:
    tr = prepare_finetune(pretrained, dataset, config.replace(phase="finetune"), model, load_mask)
    tr.run()
    return tr


def scratch(dataset: SubjectDataset, config: TrainConfig, model: ModelConfig) -> TrainingRun:
    tr = prepare_finetune(None, dataset, config.replace(phase="scratch"), model, load_mask=())
    tr.run()
    return tr


# --------------------------------------------------------------------------
# evaluation

CSV_FIELDS = ("iter", "split", "frame", "camera", "psnr", "ssim", "mse", "perceptual")


@dataclass
class EvalResult:
    rows: List[Dict[str, object]]
    summary: Dict[str, object]
    images: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def psnr(self) -> float:
        return float(self.summary["psnr"])

    def write_csv(self, path) -> Path:
        """Append per-view rows and one summary row; writes the header on a new file."""
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            if new:
                w.writeheader()
            for row in self.rows + [self.summary]:
                w.writerow(row)
        return path


def evaluate(shared: SharedState, subject: SubjectState, dataset: SubjectDataset, split: str = "eval",
             n_samples: int = 128, iteration: int = 0, views: Optional[Sequence[Tuple[int, int]]] = None,
             perceptual: Optional[PerceptualNet] = None, keep_images: bool = False) -> EvalResult:
    """Render each view deterministically (midpoint samples) and score it."""
    if views is None:
        if split not in ("train", "eval"):
            raise ConfigError(f"unknown split {split!r}")
        views = dataset.train if split == "train" else dataset.eval
    perceptual = perceptual or PerceptualNet.random(0)
    cfg = RenderConfig(n_samples=n_samples, background=dataset.background, stratified=False)
    rows = []
    images = {}
    for f, c in views:
        rec = dataset.frames[f]
        pred = render_image(shared, subject, rec.pose, dataset.cameras[c], rec.timestamp, cfg).astype(np.float64)
        gt = dataset.image(f, c)
        rows.append({
            "iter": iteration, "split": split, "frame": f, "camera": c, "psnr": psnr(pred, gt),
            "ssim": ssim(pred, gt), "mse": mse_loss(pred, gt), "perceptual": perceptual_loss(pred, gt, perceptual),
        })
        if keep_images:
            images[(f, c)] = pred
    summary = {"iter": iteration, "split": split + "_mean", "frame": "", "camera": ""}
    for k in ("psnr", "ssim", "mse", "perceptual"):
        summary[k] = float(np.mean([r[k] for r in rows])) if rows else float("nan")
    return EvalResult(rows, summary, images)
