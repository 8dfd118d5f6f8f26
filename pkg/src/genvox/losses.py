"""Photometric and perceptual losses, the phase-dependent loss schedule, and PSNR/SSIM."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

PHASES = ("pretrain", "scratch", "finetune")


# --------------------------------------------------------------------------
# MSE


def mse_loss_vjp(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.size == 0:
        raise ConfigError("mse of an empty set")
    if pred.shape != gt.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    n = diff.size
    value = float(np.sum(diff * diff) / n)

    def pullback(g=1.0):
        return (2.0 * g / n) * diff

    return value, pullback


def mse_loss(pred, gt) -> float:
    return mse_loss_vjp(pred, gt)[0]


# --------------------------------------------------------------------------
# perceptual stand-in: fixed convolutional feature pyramid


def _conv_same_vjp(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """(G, Cin, H, W) * (Cout, Cin, k, k) with zero 'same' padding."""
    G, Cin, H, Wd = x.shape
    Cout, _, k, _ = W.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (G, Cin, H, W, k, k)
    y = np.einsum("gchwij,ocij->gohw", cols, W, optimize=True) + b[None, :, None, None]

    def pullback(g):
        gW = np.einsum("gchwij,gohw->ocij", cols, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + H, j:j + Wd] += np.einsum("gohw,oc->gchw", g, W[:, :, i, j])
        return gxp[:, :, p:p + H, p:p + Wd], gW, gb

    return y, pullback


def _avgpool2_vjp(x: np.ndarray):
    G, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    xc = x[:, :, :2 * h2, :2 * w2]
    y = xc.reshape(G, C, h2, 2, w2, 2).mean(axis=(3, 5))

    def pullback(g):
        gx = np.zeros_like(x)
        gx[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        return gx

    return y, pullback


def _unit_normalize_vjp(f: np.ndarray, eps: float = 1e-6):
    norm = np.sqrt(np.sum(f * f, axis=1, keepdims=True) + eps)
    n = f / norm

    def pullback(g):
        return (g - n * np.sum(g * n, axis=1, keepdims=True)) / norm

    return n, pullback


class PerceptualNet:
    """Fixed, never-trained conv pyramid: stage = conv (same padding) + ReLU,
    with 2x average pooling between stages.

    The loss compares channel-normalized feature maps per stage and averages
    over stages, LPIPS-style.  Weights come from a seed or from a weight file
    (see :meth:`save` / :meth:`load`).
    """

    MAGIC = b"GNVP"
    VERSION = 1

    def __init__(self, stages: Sequence[Tuple[np.ndarray, np.ndarray]]):
        if not stages:
            raise ConfigError("perceptual net needs at least one stage")
        self.stages = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in stages]
        for i, (W, b) in enumerate(self.stages):
            if W.ndim != 4 or W.shape[2] != W.shape[3] or W.shape[2] % 2 == 0:
                raise ConfigError(f"stage {i}: kernels must be square with odd size")
            if i and W.shape[1] != self.stages[i - 1][0].shape[0]:
                raise ConfigError(f"stage {i}: channel mismatch with previous stage")
            if b.shape != (W.shape[0],):
                raise ConfigError(f"stage {i}: bias shape {b.shape}")

    @classmethod
    def random(cls, seed: int = 0, channels: Sequence[int] = (8, 16, 32), kernel: int = 3) -> "PerceptualNet":
        rng = np.random.default_rng(seed)
        stages = []
        cin = 3
        for cout in channels:
            bound = np.sqrt(6.0 / (cin * kernel * kernel))
            W = rng.uniform(-bound, bound, (cout, cin, kernel, kernel))
            b = rng.uniform(0.01, 0.1, cout)
            stages.append((W, b))
            cin = cout
        return cls(stages)

    @property
    def receptive_field(self) -> int:
        return self.stages[0][0].shape[2]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.MAGIC + struct.pack("<II", self.VERSION, len(self.stages)))
            for W, b in self.stages:
                fh.write(struct.pack("<III", W.shape[0], W.shape[1], W.shape[2]))
                fh.write(W.astype("<f4").tobytes())
                fh.write(b.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PerceptualNet":
        """Read a weight file: ``GNVP``, u32 version, u32 stage count, then per
        stage u32 (out, in, k) followed by float32 weights (out, in, k, k) and
        float32 bias (out), all little-endian."""
        raw = Path(path).read_bytes()
        if raw[:4] != cls.MAGIC:
            raise ConfigError("not a perceptual weight file (bad magic)")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != cls.VERSION:
            raise ConfigError(f"unsupported perceptual weight version {version}")
        off = 12
        stages = []
        for _ in range(count):
            cout, cin, k = struct.unpack_from("<III", raw, off)
            off += 12
            nw = cout * cin * k * k
            W = np.frombuffer(raw, "<f4", nw, off).reshape(cout, cin, k, k)
            off += 4 * nw
            b = np.frombuffer(raw, "<f4", cout, off)
            off += 4 * cout
            stages.append((W.astype(np.float64), b.astype(np.float64)))
        if off != len(raw):
            raise ConfigError("trailing bytes in perceptual weight file")
        return cls(stages)

    def features_vjp(self, x: np.ndarray):
        """x: (G, H, W, 3) in [0, 1]."""
        h = np.moveaxis(x * 2.0 - 1.0, -1, 1)
        feats, pulls = [], []
        for i, (W, b) in enumerate(self.stages):
            if i:
                if min(h.shape[2:]) < 2:
                    break
                h, pool_pb = _avgpool2_vjp(h)
            else:
                pool_pb = None
            W = W.astype(h.dtype)
            y, conv_pb = _conv_same_vjp(h, W, b.astype(h.dtype))
            mask = y > 0
            h = y * mask
            feats.append(h)
            pulls.append((pool_pb, conv_pb, mask))
        return feats, pulls


def perceptual_loss_vjp(pred: np.ndarray, gt: np.ndarray, net: PerceptualNet):
    """Patches (G, H, H, 3).  Returns ``(value, pullback)``; pullback gives d/d pred."""
    pred = np.asarray(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
        squeeze = True
    else:
        squeeze = False
    if min(pred.shape[1:3]) < net.receptive_field:
        raise ConfigError(f"patch {pred.shape[1:3]} smaller than the first-stage receptive field")
    fp, pulls = net.features_vjp(pred)
    fg, _ = net.features_vjp(gt)
    n_stages = len(fp)
    value = 0.0
    stage_cache = []
    for a, b in zip(fp, fg):
        na, npb = _unit_normalize_vjp(a)
        nb, _ = _unit_normalize_vjp(b)
        diff = na - nb
        spatial = diff.shape[0] * diff.shape[2] * diff.shape[3]
        value += float(np.sum(diff * diff)) / spatial / n_stages
        stage_cache.append((diff, npb, spatial))

    def pullback(g=1.0):
        gh = None
        for s in reversed(range(n_stages)):
            diff, npb, spatial = stage_cache[s]
            gs = npb((2.0 * g / spatial / n_stages) * diff)
            gh = gs if gh is None else gh + gs
            pool_pb, conv_pb, mask = pulls[s]
            gh = gh * mask
            gh, _, _ = conv_pb(gh)
            if pool_pb is not None:
                gh = pool_pb(gh)
        gx = np.moveaxis(gh, 1, -1) * 2.0
        return gx[0] if squeeze else gx

    return value, pullback


def perceptual_loss(pred, gt, net: PerceptualNet) -> float:
    return perceptual_loss_vjp(pred, gt, net)[0]


# --------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 0.2
    lambda_l: float = 1.0
    finetune_lambda_m: float = 10.0
    finetune_lambda_l: float = 0.0
    mse_only_iters: int = 300

    def __post_init__(self):
        if self.lambda_m < 0 or self.lambda_l < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_m == 0 and self.lambda_l == 0:
            raise ConfigError("at least one loss weight must be positive")

    def coefficients(self, phase: str, iteration: int) -> Tuple[float, float]:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        if phase == "finetune" and iteration < self.mse_only_iters:
            return self.finetune_lambda_m, self.finetune_lambda_l
        return self.lambda_m, self.lambda_l


def total_loss(weights: LossWeights, iteration: int, phase: str, mse: float, perceptual: float) -> float:
    lm, ll = weights.coefficients(phase, iteration)
    return lm * mse + ll * perceptual


# --------------------------------------------------------------------------
# metrics


def psnr(img_a, img_b) -> float:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.size
    rows = sliding_window_view(img, k, axis=0) @ win
    return sliding_window_view(rows, k, axis=1) @ win


def ssim(img_a, img_b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean local SSIM on the channel-mean grayscale images (valid windows only)."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if min(a.shape) < window:
        raise ConfigError(f"image {a.shape} smaller than the {window}x{window} window")
    win = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
