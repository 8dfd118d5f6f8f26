"""Dense layers and MLPs with explicit pullbacks.

Weights follow the (out, in) convention: ``y = x @ W.T + b``.
"""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .errors import ConfigError


def softplus(x):
    return np.logaddexp(0, x)


def sigmoid(x):
    # stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def linear_vjp(W: np.ndarray, b, x: np.ndarray):
    if x.shape[-1] != W.shape[1]:
        raise ConfigError(f"linear layer expects input width {W.shape[1]}, got {x.shape[-1]}")
    y = x @ W.T
    if b is not None:
        y = y + b

    def pullback(g):
        gx = g @ W
        gW = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gW, gb

    return y, pullback


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float64, zero=False):
    if zero:
        return np.zeros((n_out, n_in), dtype=dtype), np.zeros(n_out, dtype=dtype)
    bound = 1.0 / np.sqrt(n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
    b = rng.uniform(-bound, bound, size=n_out).astype(dtype)
    return W, b


def init_mlp(rng, sizes: Sequence[int], dtype=np.float64, zero_last=False, prefix="") -> Dict[str, np.ndarray]:
    params = {}
    n = len(sizes) - 1
    for i in range(n):
        W, b = init_linear(rng, sizes[i], sizes[i + 1], dtype, zero=zero_last and i == n - 1)
        params[f"{prefix}{i}.weight"] = W
        params[f"{prefix}{i}.bias"] = b
    return params


def mlp_depth(params: Dict[str, np.ndarray], prefix="") -> int:
    n = 0
    while f"{prefix}{n}.weight" in params:
        n += 1
    return n


def mlp_vjp(params: Dict[str, np.ndarray], x: np.ndarray, prefix="", final_relu=False):
    """ReLU MLP; the last layer is linear unless ``final_relu``."""
    depth = mlp_depth(params, prefix)
    pulls, masks = [], []
    h = x
    for i in range(depth):
        h, pb = linear_vjp(params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"], h)
        pulls.append(pb)
        if i < depth - 1 or final_relu:
            mask = h > 0
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)

    def pullback(g):
        grads = {}
        for i in reversed(range(depth)):
            if masks[i] is not None:
                g = g * masks[i]
            g, gW, gb = pulls[i](g)
            grads[f"{prefix}{i}.weight"] = gW
            grads[f"{prefix}{i}.bias"] = gb
        return g, grads

    return h, pullback
