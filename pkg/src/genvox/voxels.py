"""Optimizable voxel feature grids with trilinear and multi-distance interpolation.

Grid data is stored channels-last, ``(Nx, Ny, Nz, C)``, over an axis-aligned
box in canonical space.  Lattice node ``(i, j, k)`` sits at
``aabb_min + (i, j, k) * (aabb_max - aabb_min) / (N - 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError

DEFAULT_SCALES = (1, 2, 4)


@dataclass
class VoxelGrid:
    data: np.ndarray  # (Nx, Ny, Nz, C)
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        if self.data.ndim != 4:
            raise ConfigError(f"voxel data must be 4-D (Nx, Ny, Nz, C), got {self.data.shape}")
        if min(self.data.shape[:3]) < 2:
            raise ConfigError(f"voxel dims must all be >= 2, got {self.data.shape[:3]}")
        if not np.all(self.aabb_min < self.aabb_max):
            raise ConfigError("aabb min must be below max on every axis")

    @classmethod
    def zeros(cls, dims: Sequence[int], channels: int, aabb_min, aabb_max, dtype=np.float64):
        return cls(np.zeros((*dims, channels), dtype=dtype), aabb_min, aabb_max)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.aabb_min + self.aabb_max)

    def node_position(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.float64)
        n = np.asarray(self.dims, dtype=np.float64)
        return self.aabb_min + index * (self.aabb_max - self.aabb_min) / (n - 1)


def validate_scales(scales: Sequence[int], dims: Sequence[int]) -> Tuple[int, ...]:
    scales = tuple(int(s) for s in scales)
    if not scales:
        raise ConfigError("at least one interpolation scale is required")
    if any(s <= 0 for s in scales):
        raise ConfigError(f"scales must be positive, got {scales}")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ConfigError(f"scales must be strictly increasing, got {scales}")
    if scales[-1] >= min(dims) / 2:
        raise ConfigError(f"scale {scales[-1]} too large for grid dims {tuple(dims)}")
    return scales


def world_to_grid(grid_or_dims, points, aabb_min=None, aabb_max=None):
    """Map points to continuous lattice indices.

    Returns ``(index, inside)``; ``inside`` is False for points outside the
    box (those indices are meaningless and must not be used).
    """
    if isinstance(grid_or_dims, VoxelGrid):
        dims, aabb_min, aabb_max = grid_or_dims.dims, grid_or_dims.aabb_min, grid_or_dims.aabb_max
    else:
        dims = grid_or_dims
    points = np.asarray(points)
    lo = np.asarray(aabb_min, dtype=points.dtype)
    hi = np.asarray(aabb_max, dtype=points.dtype)
    n1 = np.asarray(dims, dtype=points.dtype) - 1
    index = (points - lo) * (n1 / (hi - lo))
    inside = np.all((points >= lo) & (points <= hi), axis=-1)
    return index, inside


def _corners(index: np.ndarray, dims, scale: int):
    """Lower corner, fractional offset and stride for a stride-``scale`` cell.

    The lower corner is snapped to the stride-``scale`` sub-lattice; where the
    last sub-lattice cell would overrun the grid it is shifted down to end at
    ``N - 1`` so the cell keeps its physical width.
    """
    n = np.asarray(dims, dtype=index.dtype)
    scale = np.asarray(scale, dtype=index.dtype)
    base = np.floor(index / scale) * scale
    base = np.clip(base, 0, n - 1 - scale)
    frac = (index - base) / scale
    return base.astype(np.int64), frac


_OFFSETS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)


def trilinear_vjp(data: np.ndarray, index: np.ndarray, inside: np.ndarray, scale=1, channel=None):
    """Sample ``data`` at continuous ``index`` (P, 3) with a stride-``scale`` cell.

    ``scale`` is an int or a per-point int array; ``channel`` is None (all
    channels), an int, or a per-point channel array.  Returns
    ``(features, pullback)``; features are ``(P, C)`` or ``(P,)`` when a channel
    is selected.  ``pullback(g)`` returns ``(g_index, g_data)`` with ``g_index``
    in lattice-index units.
    """
    dims = data.shape[:3]
    C = data.shape[3]
    stride = np.asarray(scale)
    s_col = stride[:, None] if stride.ndim else stride
    safe = np.where(inside[:, None], index, 0)
    base, frac = _corners(safe, dims, s_col)
    # corner (a, b, c) in {0,1}^3 sits at base + scale * (a, b, c); corners are ordered a-major
    step = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    flat0 = base @ step
    flat = flat0[None, :] + stride * (_OFFSETS @ step)[:, None]  # (8, P)
    one = np.ones((), dtype=frac.dtype)
    wx, wy, wz = (np.stack([one - frac[:, a], frac[:, a]]) for a in range(3))  # each (2, P)
    wx = wx * inside
    wyz = (wy[:, None, :] * wz[None, :, :])  # (2, 2, P)
    w_corner = (wx[:, None, None, :] * wyz[None]).reshape(8, -1)
    table = data.reshape(-1)
    if channel is None:
        slot = flat[..., None] * C + np.arange(C)  # (8, P, C)
        vals = table[slot]
        out = np.einsum("kp,kpc->pc", w_corner, vals)
    else:
        slot = flat * C + np.asarray(channel)  # (8, P)
        vals = table[slot]
        out = np.einsum("kp,kp->p", w_corner, vals)

    def pullback(g):
        g = np.asarray(g)
        if channel is None:
            gv = np.einsum("kpc,pc->kp", vals, g)
            contrib = w_corner[:, :, None] * g[None, :, :]
        else:
            gv = vals * g[None, :]
            contrib = w_corner * g[None, :]
        gv = gv.reshape(2, 2, 2, -1)
        # d/dfrac of each axis weight pair is (-1, +1)
        g_index = np.stack([
            ((gv[1] - gv[0]) * wyz).sum(axis=(0, 1)) * inside,
            ((gv[:, 1] - gv[:, 0]) * (wx[:, None, :] * wz[None, :, :])).sum(axis=(0, 1)),
            ((gv[:, :, 1] - gv[:, :, 0]) * (wx[:, None, :] * wy[None, :, :])).sum(axis=(0, 1)),
        ], axis=-1) / np.asarray(s_col, dtype=frac.dtype)
        g_data = np.bincount(slot.reshape(-1), weights=contrib.reshape(-1), minlength=table.size)
        return g_index, g_data.astype(data.dtype, copy=False).reshape(data.shape)

    return out, pullback


def trilinear_sample(grid: VoxelGrid, points) -> np.ndarray:
    """Plain 8-corner trilinear sample; points outside the box give zeros."""
    return trilinear_sample_vjp(grid, points)[0]


def trilinear_sample_vjp(grid: VoxelGrid, points):
    return mdi_sample_vjp(grid, points, (1,))


def mdi_sample(grid: VoxelGrid, points, scales: Sequence[int] = DEFAULT_SCALES) -> np.ndarray:
    return mdi_sample_vjp(grid, points, scales)[0]


def mdi_sample_vjp(grid: VoxelGrid, points, scales: Sequence[int] = DEFAULT_SCALES):
    """Multi-distance interpolation: one trilinear sample per stride, concatenated.

    Returns features ``(P, len(scales) * C)`` and a pullback mapping their
    cotangent to ``(g_points, g_data)``.
    """
    scales = validate_scales(scales, grid.dims)
    points = np.asarray(points)
    single = points.ndim == 1
    pts = points.reshape(-1, 3)
    index, inside = world_to_grid(grid, pts)
    P, S, C = pts.shape[0], len(scales), grid.channels
    # all strides in one gather: stride-major copies of the points
    f, pb = trilinear_vjp(grid.data, np.tile(index, (S, 1)), np.tile(inside, S),
                          np.repeat(np.asarray(scales, dtype=np.int64), P))
    out = f.reshape(S, P, C).transpose(1, 0, 2).reshape(P, S * C)
    to_index = ((np.asarray(grid.dims, dtype=np.float64) - 1) / (grid.aabb_max - grid.aabb_min)).astype(pts.dtype)

    def pullback(g):
        g = np.asarray(g).reshape(P, S, C).transpose(1, 0, 2).reshape(S * P, C)
        gi, g_data = pb(g)
        g_pts = gi.reshape(S, P, 3).sum(axis=0) * to_index
        if single:
            g_pts = g_pts[0]
        return g_pts, g_data

    if single:
        out = out[0]
    return out, pullback
