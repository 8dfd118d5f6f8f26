"""Sinusoidal frequency encoding."""
from __future__ import annotations

import numpy as np

# default frequency counts per input group
FEATURE_FREQS = 2
COORD_FREQS = 10
DIR_FREQS = 4
TIME_FREQS = 4


def encoded_dim(n_components: int, n_freqs: int) -> int:
    return 2 * n_freqs * n_components


def positional_encode(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """Encode the last axis of ``x`` as (sin 2^0 x, cos 2^0 x, ..., sin 2^{L-1} x, cos 2^{L-1} x).

    Components are concatenated in input order; there is no raw passthrough.
    ``n_freqs == 0`` yields an empty trailing axis.
    """
    return positional_encode_vjp(x, n_freqs)[0]


def positional_encode_vjp(x: np.ndarray, n_freqs: int):
    x = np.asarray(x)
    scalar_input = x.ndim == 0
    if scalar_input:
        x = x[None]
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=False)
    freqs = (2.0 ** np.arange(n_freqs)).astype(dtype)
    arg = x[..., :, None] * freqs  # (..., D, L)
    s, c = np.sin(arg), np.cos(arg)
    out = np.stack([s, c], axis=-1).reshape(*x.shape[:-1], x.shape[-1] * 2 * n_freqs)

    def pullback(g):
        g = np.asarray(g).reshape(*x.shape, n_freqs, 2)
        gx = ((g[..., 0] * c - g[..., 1] * s) * freqs).sum(axis=-1)
        if scalar_input:
            gx = gx[0]
        return gx

    return out, pullback
