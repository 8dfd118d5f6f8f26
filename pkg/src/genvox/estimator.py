"""scikit-learn style wrapper around pretraining, fine-tuning and scratch training.

``X`` for :meth:`AvatarEstimator.fit` is a sequence of
:class:`~genvox.dataset.SubjectDataset`.  With several subjects the estimator
pretrains shared modules; with one it fine-tunes from ``pretrained`` or trains
from scratch.  ``predict`` and ``score`` take ``(frame, camera)`` views of the
(last) fitted subject.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import LearningRates
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SubjectDataset
from .errors import ConfigError
from .losses import psnr
from .model import SHARED_COMPONENTS, ModelConfig, SharedState, canonical_aabb, render_image
from .renderer import RenderConfig
from .trainer import TrainConfig, pretrain, prepare_finetune


def check_datasets(X) -> list:
    """Validate ``X`` as a non-empty sequence of datasets with training views and
    matching bone counts."""
    if isinstance(X, SubjectDataset):
        X = [X]
    X = list(X)
    if not X:
        raise ConfigError("need at least one subject dataset")
    for ds in X:
        if not isinstance(ds, SubjectDataset):
            raise ConfigError(f"expected SubjectDataset, got {type(ds).__name__}")
        if not ds.train:
            raise ConfigError(f"subject {ds.subject_id!r} has no training views")
    ks = {ds.skeleton.K for ds in X}
    if len(ks) != 1:
        raise ConfigError(f"subjects disagree on bone count: {sorted(ks)}")
    return X


def check_views(views, dataset: SubjectDataset) -> list:
    """Validate ``(frame, camera)`` pairs against ``dataset``."""
    out = []
    for v in views:
        try:
            f, c = (int(x) for x in v)
        except (TypeError, ValueError):
            raise ConfigError(f"views must be (frame, camera) pairs, got {v!r}") from None
        if not (0 <= f < len(dataset.frames) and 0 <= c < len(dataset.cameras)):
            raise ConfigError(f"view {(f, c)} outside dataset with {len(dataset.frames)} frames, "
                              f"{len(dataset.cameras)} cameras")
        out.append((f, c))
    return out


class AvatarEstimator(BaseEstimator):
    """Fit voxel radiance fields to articulated-body image sets.

    Parameters mirror :class:`~genvox.model.ModelConfig` and
    :class:`~genvox.trainer.TrainConfig`; ``pretrained`` may be a
    :class:`~genvox.model.SharedState` or a checkpoint path, in which case a
    single-subject fit fine-tunes the components listed in ``load_mask``.
    """

    def __init__(self, voxel_dims=(40, 40, 40), voxel_channels=6, embed_dim=128, weight_expand=256,
                 weight_channels=(32, 16, 8), pose_hidden=(256, 256, 256), radiance_width=128, radiance_depth=4,
                 cull_radius=0.25, iterations=1000, n_samples=32, patch_count=4, patch_size=16,
                 lr_base=5e-5, lr_voxels=2e-2, lr_radiance=5e-4, pretrained=None, load_mask=SHARED_COMPONENTS,
                 eval_samples=64, seed=0):
        self.voxel_dims = voxel_dims
        self.voxel_channels = voxel_channels
        self.embed_dim = embed_dim
        self.weight_expand = weight_expand
        self.weight_channels = weight_channels
        self.pose_hidden = pose_hidden
        self.radiance_width = radiance_width
        self.radiance_depth = radiance_depth
        self.cull_radius = cull_radius
        self.iterations = iterations
        self.n_samples = n_samples
        self.patch_count = patch_count
        self.patch_size = patch_size
        self.lr_base = lr_base
        self.lr_voxels = lr_voxels
        self.lr_radiance = lr_radiance
        self.pretrained = pretrained
        self.load_mask = load_mask
        self.eval_samples = eval_samples
        self.seed = seed

    def _model_config(self, X) -> ModelConfig:
        lo, hi = canonical_aabb([d.skeleton for d in X], 0.15)
        return ModelConfig(K=X[0].skeleton.K, aabb_min=lo, aabb_max=hi, voxel_dims=self.voxel_dims,
                           voxel_channels=self.voxel_channels, embed_dim=self.embed_dim,
                           weight_expand=self.weight_expand, weight_channels=self.weight_channels,
                           pose_hidden=self.pose_hidden, radiance_width=self.radiance_width,
                           radiance_depth=self.radiance_depth, cull_radius=self.cull_radius)

    def _train_config(self, phase: str) -> TrainConfig:
        return TrainConfig(phase=phase, iterations=self.iterations, seed=self.seed,
                           rates=LearningRates(self.lr_base, self.lr_voxels, self.lr_radiance),
                           render=RenderConfig(n_samples=self.n_samples, patch_count=self.patch_count,
                                               patch_size=self.patch_size))

    def _pretrained_state(self) -> Optional[SharedState]:
        if self.pretrained is None or isinstance(self.pretrained, SharedState):
            return self.pretrained
        return load_checkpoint(self.pretrained).shared

    def fit(self, X, y=None):
        X = check_datasets(X)
        if len(X) > 1:
            run = pretrain(X, self._train_config("pretrain"), self._model_config(X), run=False)
        else:
            shared = self._pretrained_state()
            if shared is not None:
                run = prepare_finetune(shared, X[0], self._train_config("finetune"), shared.config,
                                       tuple(self.load_mask))
            else:
                run = prepare_finetune(None, X[0], self._train_config("scratch"), self._model_config(X), ())
        run.run(log_every=0)
        self.run_ = run
        self.shared_ = run.shared
        self.subjects_ = run.subjects
        self.datasets_ = X
        self.loss_curve_ = [r.loss for r in run.history]
        self.n_iter_ = run.iteration
        return self

    def _target(self, subject: Optional[int]):
        idx = len(self.subjects_) - 1 if subject is None else subject
        return self.subjects_[idx], self.datasets_[idx]

    def predict(self, X: Sequence[Tuple[int, int]], subject: Optional[int] = None) -> np.ndarray:
        """Deterministic renders (n, H, W, 3) of the given views."""
        check_is_fitted(self, "shared_")
        state, ds = self._target(subject)
        views = check_views(X, ds)
        rc = RenderConfig(n_samples=self.eval_samples, background=ds.background, stratified=False)
        return np.stack([render_image(self.shared_, state, ds.frames[f].pose, ds.cameras[c],
                                      ds.frames[f].timestamp, rc) for f, c in views])

    def score(self, X=None, y=None, subject: Optional[int] = None) -> float:
        """Mean PSNR over ``X`` views (default: the held-out camera views)."""
        check_is_fitted(self, "shared_")
        _, ds = self._target(subject)
        views = check_views(ds.eval if X is None else X, ds)
        pred = self.predict(views, subject)
        return float(np.mean([psnr(p.astype(np.float64), ds.image(f, c)) for p, (f, c) in zip(pred, views)]))

    def save(self, path):
        check_is_fitted(self, "shared_")
        return save_checkpoint(path, self.shared_, self.subjects_, self.n_iter_)
