"""JSON run configuration with strict key checking.

Every section is a plain mapping; unknown keys at any level are rejected so a
typo fails before any data is generated or any step is taken.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from .autodiff import LearningRates
from .errors import ConfigError
from .losses import LossWeights
from .model import SHARED_COMPONENTS, ModelConfig, canonical_aabb
from .renderer import RenderConfig
from .trainer import TrainConfig


def _strict(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DataConfig:
    root: str = "data"
    subjects: int = 5
    frames: int = 20
    cameras: int = 4
    image_size: int = 64
    seed: int = 0
    # ids used for pretraining; None means every subject except ``target``
    pretrain_subjects: Optional[List[str]] = None
    # subject for fine-tuning, scratch training, rendering and evaluation; None = last
    target: Optional[str] = None

    def __post_init__(self):
        for name in ("subjects", "frames", "cameras"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")
        if self.image_size < 8:
            raise ConfigError("data.image_size must be >= 8")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    # ModelConfig overrides; aabb defaults to a box around the training skeletons
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    load_mask: List[str] = field(default_factory=lambda: list(SHARED_COMPONENTS))
    pretrained: Optional[str] = None
    out_dir: str = "runs"
    checkpoint_every: int = 500
    eval_every: int = 0
    eval_samples: int = 64
    log_every: int = 100
    aabb_pad: float = 0.15

    def __post_init__(self):
        unknown = set(self.load_mask) - set(SHARED_COMPONENTS)
        if unknown:
            raise ConfigError(f"load_mask: unknown components {sorted(unknown)}; choose from {SHARED_COMPONENTS}")
        if self.checkpoint_every < 0 or self.eval_every < 0 or self.log_every < 0:
            raise ConfigError("checkpoint_every, eval_every and log_every must be >= 0")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        # build once with a placeholder box so bad model keys fail now
        self.model_config([])

    def model_config(self, skeletons: Sequence) -> ModelConfig:
        d = dict(self.model)
        if skeletons and ("aabb_min" not in d or "aabb_max" not in d):
            lo, hi = canonical_aabb(list(skeletons), self.aabb_pad)
            d.setdefault("aabb_min", lo)
            d.setdefault("aabb_max", hi)
        if skeletons:
            d.setdefault("K", skeletons[0].K)
        return ModelConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(known)}")
        d = dict(d)
        d["data"] = _strict(DataConfig, d.get("data"), "data")
        d["train"] = train_config_from_dict(d.get("train") or {})
        if not isinstance(d.get("model", {}), dict):
            raise ConfigError("model: expected an object")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data), "model": dict(self.model), "train": self.train.to_dict(),
            "load_mask": list(self.load_mask), "pretrained": self.pretrained, "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every, "eval_every": self.eval_every,
            "eval_samples": self.eval_samples, "log_every": self.log_every, "aabb_pad": self.aabb_pad,
        }

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def train_config_from_dict(d: dict) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError("train: expected an object")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"train: unknown keys {unknown}; allowed: {sorted(known)}")
    d = dict(d)
    d["rates"] = _strict(LearningRates, d.get("rates"), "train.rates")
    d["loss"] = _strict(LossWeights, d.get("loss"), "train.loss")
    render = d.get("render")
    if isinstance(render, dict) and "background" in render:
        render = dict(render, background=tuple(render["background"]))
    d["render"] = _strict(RenderConfig, render, "train.render")
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def toy_config() -> RunConfig:
    """Small enough for the full gen-data/scratch/eval pipeline in a few minutes."""
    return RunConfig.from_dict({
        "data": {"subjects": 2, "frames": 6, "cameras": 2, "image_size": 32},
        "model": {"voxel_dims": [24, 24, 24], "embed_dim": 32, "weight_expand": 64, "weight_channels": [16, 8],
                  "pose_hidden": [64], "radiance_width": 64, "color_width": 32, "cull_radius": 0.25},
        "train": {"iterations": 200, "render": {"n_samples": 24, "patch_count": 2, "patch_size": 16}},
        "checkpoint_every": 100, "eval_samples": 32,
    })


def desk_config() -> RunConfig:
    """The desk-scale benchmark settings used by the transfer experiment."""
    return RunConfig.from_dict({
        "model": {"voxel_dims": [40, 40, 40], "weight_expand": 256, "weight_channels": [32, 16, 8],
                  "cull_radius": 0.25},
        "train": {"render": {"n_samples": 32, "patch_count": 4, "patch_size": 16}},
    })


PRESETS = {"toy": toy_config, "desk": desk_config}
