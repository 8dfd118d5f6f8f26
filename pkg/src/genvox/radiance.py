"""Radiance network decoding voxel features, time, coordinates and direction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import encoding
from .errors import ConfigError
from .layers import init_linear, init_mlp, linear_vjp, mlp_vjp, sigmoid, softplus

DENSITY_BIAS_INIT = -1.0


@dataclass(frozen=True)
class RadianceSpec:
    feature_dim: int = 18  # per grid: len(scales) * channels
    feature_freqs: int = encoding.FEATURE_FREQS
    time_freqs: int = encoding.TIME_FREQS
    coord_freqs: int = encoding.COORD_FREQS
    dir_freqs: int = encoding.DIR_FREQS
    width: int = 128
    depth: int = 4
    color_width: int = 64

    @property
    def trunk_in(self) -> int:
        return (2 * encoding.encoded_dim(self.feature_dim, self.feature_freqs)
                + encoding.encoded_dim(1, self.time_freqs)
                + encoding.encoded_dim(3, self.coord_freqs))

    @property
    def dir_in(self) -> int:
        return encoding.encoded_dim(3, self.dir_freqs)


def init_radiance(rng, spec: RadianceSpec, dtype=np.float64) -> Dict[str, np.ndarray]:
    params = init_mlp(rng, [spec.trunk_in] + [spec.width] * spec.depth, dtype, prefix="trunk.")
    W, b = init_linear(rng, spec.width, 1, dtype)
    params["density.weight"] = W
    params["density.bias"] = np.full(1, DENSITY_BIAS_INIT, dtype=dtype)
    params.update(init_mlp(rng, [spec.width + spec.dir_in, spec.color_width, 3], dtype, prefix="color."))
    return params


def radiance_vjp(params: Dict[str, np.ndarray], spec: RadianceSpec, v_general, v_individual, t, x_obs, d):
    """Evaluate color (P, 3) in (0, 1) and density (P,) >= 0.

    Density is read off the trunk before the direction is injected, so it
    does not depend on ``d``.  The pullback maps ``(g_color, g_sigma)`` to
    ``(input_grads, param_grads)`` with input grads keyed
    ``v_general, v_individual, t, x_obs, d``.
    """
    P = x_obs.shape[0]
    for name, v in (("v_general", v_general), ("v_individual", v_individual)):
        if v.shape != (P, spec.feature_dim):
            raise ConfigError(f"{name} must have shape ({P}, {spec.feature_dim}), got {v.shape}")
    dtype = params["density.weight"].dtype
    t = np.broadcast_to(np.asarray(t, dtype=dtype).reshape(-1, 1), (P, 1))
    eg, pg = encoding.positional_encode_vjp(v_general, spec.feature_freqs)
    ei, pi = encoding.positional_encode_vjp(v_individual, spec.feature_freqs)
    et, pt = encoding.positional_encode_vjp(t, spec.time_freqs)
    ex, px = encoding.positional_encode_vjp(x_obs, spec.coord_freqs)
    ed, pd = encoding.positional_encode_vjp(d, spec.dir_freqs)
    trunk_in = np.concatenate([eg, ei, et, ex], axis=1)
    if trunk_in.shape[1] != spec.trunk_in:
        raise ConfigError(f"trunk input width {trunk_in.shape[1]} != {spec.trunk_in}")
    h, trunk_pb = mlp_vjp(params, trunk_in, prefix="trunk.", final_relu=True)
    s_pre, dens_pb = linear_vjp(params["density.weight"], params["density.bias"], h)
    sigma = softplus(s_pre[:, 0])
    c_in = np.concatenate([h, ed], axis=1)
    c_pre, color_pb = mlp_vjp(params, c_in, prefix="color.")
    color = sigmoid(c_pre)
    splits = np.cumsum([eg.shape[1], ei.shape[1], et.shape[1]])

    def pullback(g_color, g_sigma):
        grads = {}
        g_cpre = g_color * color * (1 - color)
        g_cin, cg = color_pb(g_cpre)
        grads.update(cg)
        g_h = g_cin[:, :spec.width]
        g_ed = g_cin[:, spec.width:]
        g_spre = (g_sigma * sigmoid(s_pre[:, 0]))[:, None]
        g_h2, gW, gb = dens_pb(g_spre)
        grads["density.weight"] = gW
        grads["density.bias"] = gb
        g_in, tg = trunk_pb(g_h + g_h2)
        grads.update(tg)
        g_eg, g_ei, g_et, g_ex = np.split(g_in, splits, axis=1)
        inputs = {
            "v_general": pg(g_eg),
            "v_individual": pi(g_ei),
            "t": pt(g_et)[:, 0],
            "x_obs": px(g_ex),
            "d": pd(g_ed),
        }
        return inputs, grads

    return (color, sigma), pullback


def radiance(params, spec: RadianceSpec, v_general, v_individual, t, x_obs, d):
    return radiance_vjp(params, spec, v_general, v_individual, t, x_obs, d)[0]
