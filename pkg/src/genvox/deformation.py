"""Observation-to-canonical deformation driven by a learned blend-weight volume.

An embedding ``z`` is decoded by one affine layer and a stack of transposed 3D
convolutions into a ``(K + 1)``-channel volume over the canonical box; the last
channel is background.  Per-bone weights are trilinear samples of that volume,
normalized with the background mass, and blend the bones' rigid transforms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .layers import softplus, sigmoid
from .skeleton import BoneTransforms, Skeleton
from .voxels import trilinear_vjp, world_to_grid

WEIGHT_EPS = 1e-8


@dataclass(frozen=True)
class WeightNetSpec:
    K: int
    embed_dim: int = 128
    expand: int = 1024
    channels: Sequence[int] = (256, 128, 64)
    kernel: int = 4
    final_scale: float = 1.0

    @property
    def volume_res(self) -> int:
        return 4 * 2 ** len(self.channels)

    @property
    def layer_channels(self):
        """(in, out) channel pairs of the deconvolution stack."""
        chans = [self.expand, *self.channels, self.K + 1]
        return list(zip(chans[:-1], chans[1:]))


def conv_transpose3d_vjp(x: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """Single-sample transposed 3D convolution on cubic inputs.

    ``x``: (Cin, D, D, D); ``W``: (Cin, Cout, k, k, k).  Output side is
    ``(D - 1) * stride + k - 2 * pad``.
    """
    Cin, D = x.shape[0], x.shape[1]
    if W.shape[0] != Cin:
        raise ConfigError(f"deconv expects {W.shape[0]} input channels, got {Cin}")
    Cout, k = W.shape[1], W.shape[2]
    full = (D - 1) * stride + k
    out_side = full - 2 * pad
    x2 = x.reshape(Cin, -1)
    W2 = W.reshape(Cin, -1)
    Q = k // stride
    if Q * stride != k:
        raise ConfigError(f"kernel {k} must be a multiple of stride {stride}")
    M = D - 1 + Q  # output blocks of width ``stride`` per axis
    # kernel tap a = stride * q + r lands in output block i + q at offset r
    cols = (x2.T @ W2).reshape(D, D, D, Cout, Q, stride, Q, stride, Q, stride)
    cols = cols.transpose(3, 4, 6, 8, 0, 5, 1, 7, 2, 9)  # (Cout, q1, q2, q3, D, r1, D, r2, D, r3)
    y = np.zeros((Cout, M, stride, M, stride, M, stride), dtype=x.dtype)
    for q1 in range(Q):
        for q2 in range(Q):
            for q3 in range(Q):
                y[:, q1:q1 + D, :, q2:q2 + D, :, q3:q3 + D, :] += cols[:, q1, q2, q3]
    y = y.reshape(Cout, full, full, full)
    y = y[:, pad:pad + out_side, pad:pad + out_side, pad:pad + out_side] + b[:, None, None, None]

    def pullback(g):
        gfull = np.zeros((Cout, full, full, full), dtype=g.dtype)
        gfull[:, pad:pad + out_side, pad:pad + out_side, pad:pad + out_side] = g
        gr = gfull.reshape(Cout, M, stride, M, stride, M, stride)
        gcols = np.empty((Cout, Q, Q, Q, D, stride, D, stride, D, stride), dtype=g.dtype)
        for q1 in range(Q):
            for q2 in range(Q):
                for q3 in range(Q):
                    gcols[:, q1, q2, q3] = gr[:, q1:q1 + D, :, q2:q2 + D, :, q3:q3 + D, :]
        gcols2 = gcols.transpose(4, 6, 8, 0, 1, 5, 2, 7, 3, 9).reshape(D ** 3, -1)
        gW = (x2 @ gcols2).reshape(W.shape)
        gx = (gcols2 @ W2.T).T.reshape(x.shape)
        gb = g.sum(axis=(1, 2, 3))
        return gx, gW, gb

    return y, pullback


def init_weight_net(rng, spec: WeightNetSpec, dtype=np.float64) -> Dict[str, np.ndarray]:
    params = {}
    bound = 1.0 / np.sqrt(spec.embed_dim)
    params["expand.weight"] = rng.uniform(-bound, bound, (spec.expand, spec.embed_dim)).astype(dtype)
    params["expand.bias"] = rng.uniform(-bound, bound, spec.expand).astype(dtype)
    layers = spec.layer_channels
    k = spec.kernel
    for i, (cin, cout) in enumerate(layers):
        stride = 1 if i == 0 else 2
        fan = cin * k ** 3 / stride ** 3
        bound = 1.0 / np.sqrt(fan)
        W = rng.uniform(-bound, bound, (cin, cout, k, k, k))
        bias = rng.uniform(-bound, bound, cout)
        if i == len(layers) - 1:
            W = W * spec.final_scale
            bias = np.zeros(cout)
        params[f"deconv{i}.weight"] = W.astype(dtype)
        params[f"deconv{i}.bias"] = bias.astype(dtype)
    return params


def skinning_log_prior(skeleton: Skeleton, aabb_min, aabb_max, res: int, sigma: float = 0.1,
                       background: float = 0.05, floor: float = -30.0) -> np.ndarray:
    """Fixed log-space bias (res, res, res, K + 1) from rest-pose bone segments.

    Bone channel ``i`` holds ``-d_i^2 / (2 sigma^2)`` with ``d_i`` the distance to
    bone ``i``'s rest segment; the background channel is ``log(background)``.
    """
    axes = [np.linspace(aabb_min[a], aabb_max[a], res) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty((grid.shape[0], skeleton.K + 1))
    for i in range(skeleton.K):
        d = segment_distance(grid, skeleton.rest_joints[i], skeleton.rest_tails[i])
        out[:, i] = np.maximum(-(d ** 2) / (2 * sigma ** 2), floor)
    out[:, -1] = np.log(background)
    return out.reshape(res, res, res, skeleton.K + 1)


def segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=-1)


def generate_weight_volume_vjp(params: Dict[str, np.ndarray], z: np.ndarray, spec: WeightNetSpec,
                               log_prior: Optional[np.ndarray] = None):
    """Decode ``z`` into a non-negative (res, res, res, K + 1) volume.

    ``volume = softplus(net(z) + log_prior)``.  Returns ``(volume, pullback)``
    with ``pullback(g_volume) -> (g_z, param_grads)``.
    """
    if z.shape != (spec.embed_dim,):
        raise ConfigError(f"embedding must have shape ({spec.embed_dim},), got {z.shape}")
    h = params["expand.weight"] @ z + params["expand.bias"]
    m0 = h > 0
    h = (h * m0).reshape(spec.expand, 1, 1, 1)
    pulls, masks = [], []
    n_layers = len(spec.layer_channels)
    for i in range(n_layers):
        stride, pad = (1, 0) if i == 0 else (2, (spec.kernel - 2) // 2)
        h, pb = conv_transpose3d_vjp(h, params[f"deconv{i}.weight"], params[f"deconv{i}.bias"], stride, pad)
        pulls.append(pb)
        if i < n_layers - 1:
            m = h > 0
            h = h * m
            masks.append(m)
    pre = np.moveaxis(h, 0, -1)
    if pre.shape[0] != spec.volume_res:
        raise ConfigError(f"weight volume side {pre.shape[0]} != expected {spec.volume_res}")
    if log_prior is not None:
        pre = pre + log_prior.astype(pre.dtype)
    volume = softplus(pre)

    def pullback(g_vol):
        g = np.moveaxis(g_vol * sigmoid(pre), -1, 0)
        grads = {}
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                g = g * masks[i]
            g, gW, gb = pulls[i](g)
            grads[f"deconv{i}.weight"] = gW
            grads[f"deconv{i}.bias"] = gb
        g = g.reshape(-1) * m0
        grads["expand.weight"] = np.outer(g, z)
        grads["expand.bias"] = g
        g_z = params["expand.weight"].T @ g
        return g_z, grads

    return volume, pullback


def generate_weight_volume(params, z, spec: WeightNetSpec, log_prior=None) -> np.ndarray:
    return generate_weight_volume_vjp(params, z, spec, log_prior)[0]


def blend_weights_vjp(volume: np.ndarray, aabb_min, aabb_max, x_obs: np.ndarray,
                      transforms: BoneTransforms, sample_space: str = "canonical"):
    """Normalized per-bone weights (P, K) and background weight (P,).

    Bone ``i``'s raw weight is read from channel ``i`` at the bone-transformed
    point (``sample_space='canonical'``) or at ``x_obs`` (``'observation'``); the
    background channel is read at ``x_obs``.  Also returns the transformed
    points (K, P, 3) that the caller blends.
    """
    if sample_space not in ("canonical", "observation"):
        raise ConfigError(f"unknown sample_space {sample_space!r}")
    K = transforms.R.shape[0]
    if volume.shape[-1] != K + 1:
        raise ConfigError(f"weight volume has {volume.shape[-1]} channels, expected {K + 1}")
    dims = volume.shape[:3]
    lo = np.asarray(aabb_min, dtype=np.float64)
    hi = np.asarray(aabb_max, dtype=np.float64)
    to_index = ((np.asarray(dims, dtype=np.float64) - 1) / (hi - lo)).astype(x_obs.dtype)
    R = transforms.R.astype(x_obs.dtype)
    y = np.einsum("kij,pj->kpi", R, x_obs) + transforms.T.astype(x_obs.dtype)[:, None, :]
    P = x_obs.shape[0]
    obs_index, obs_inside = world_to_grid(dims, x_obs, lo, hi)
    if sample_space == "canonical":
        idx, inside = world_to_grid(dims, y.reshape(-1, 3), lo, hi)
    else:
        idx, inside = np.tile(obs_index, (K, 1)), np.tile(obs_inside, K)
    # bone channels and the background channel in one gather, channel-major
    raw_all, raw_pb = trilinear_vjp(volume, np.concatenate([idx, obs_index]),
                                    np.concatenate([inside, obs_inside]), 1,
                                    channel=np.repeat(np.arange(K + 1), P))
    raw = raw_all[:K * P].reshape(K, P).T  # (P, K)
    raw_bg = raw_all[K * P:]
    S = raw.sum(axis=1) + raw_bg + WEIGHT_EPS
    w = raw / S[:, None]
    w_bg = raw_bg / S

    def pullback(g_w, g_wbg, g_y):
        """Cotangents of (w, w_bg, y) -> (g_volume, g_R, g_T)."""
        dot = (g_w * w).sum(axis=1) + g_wbg * w_bg
        g_raw = (g_w - dot[:, None]) / S[:, None]
        g_rawbg = (g_wbg - dot) / S
        gi, g_vol = raw_pb(np.concatenate([g_raw.T.reshape(-1), g_rawbg]))
        g_y = g_y.copy()
        if sample_space == "canonical":
            g_y += gi[:K * P].reshape(K, P, 3) * to_index
        g_R = np.einsum("kpi,pj->kij", g_y, x_obs)
        g_T = g_y.sum(axis=1)
        return g_vol, g_R, g_T

    return (w, w_bg, y), pullback


def blend_weights(volume, aabb_min, aabb_max, x_obs, transforms, sample_space="canonical"):
    (w, w_bg, _), _ = blend_weights_vjp(volume, aabb_min, aabb_max, x_obs, transforms, sample_space)
    return w, w_bg


def deform_vjp(volume: np.ndarray, aabb_min, aabb_max, x_obs: np.ndarray, transforms: BoneTransforms,
               sample_space: str = "canonical"):
    """``x_c = sum_i w_i (R_i x + T_i)`` plus the bone-weight total ``confidence``.

    The background weight displaces nothing; its mass lowers ``confidence``,
    which downstream scales density so low-confidence points render empty.
    Returns ``((x_c, confidence), pullback)`` with
    ``pullback(g_xc, g_conf) -> (g_volume, g_R, g_T)``.
    """
    (w, w_bg, y), bw_pb = blend_weights_vjp(volume, aabb_min, aabb_max, x_obs, transforms, sample_space)
    x_c = np.einsum("pk,kpi->pi", w, y)
    conf = w.sum(axis=1)

    def pullback(g_xc, g_conf=None):
        g_w = np.einsum("pi,kpi->pk", g_xc, y)
        if g_conf is not None:
            g_w = g_w + g_conf[:, None]
        g_y = w.T[:, :, None] * g_xc[None, :, :]
        return bw_pb(g_w, np.zeros_like(w_bg), g_y)

    return (x_c, conf), pullback


def deform(x_obs, transforms: BoneTransforms, volume, aabb_min, aabb_max, sample_space="canonical"):
    (x_c, _), _ = deform_vjp(volume, aabb_min, aabb_max, x_obs, transforms, sample_space)
    return x_c
