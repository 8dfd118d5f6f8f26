"""Cameras, ray generation, patch sampling, stratified sampling and volume rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError


@dataclass
class Camera:
    """Pinhole camera; ``rotation`` is world-from-camera with +z forward, +x
    right, +y down."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    position: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-8):
            raise ConfigError("camera rotation must be orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, width: int, height: int, fov_deg: float) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, R, eye, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "position": self.position.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["rotation"], d["position"],
                   int(d["width"]), int(d["height"]))


@dataclass
class RenderConfig:
    n_samples: int = 128
    patch_count: int = 6
    patch_size: int = 32
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stratified: bool = True

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.patch_count < 1 or self.patch_size < 1:
            raise ConfigError("patch_count and patch_size must be positive")


def pixel_centers(cols, rows) -> np.ndarray:
    """Integer pixel indices -> continuous coordinates of their centers."""
    return np.stack([np.asarray(cols) + 0.5, np.asarray(rows) + 0.5], axis=-1).astype(np.float64)


def generate_rays(camera: Camera, pixels) -> Tuple[np.ndarray, np.ndarray]:
    """Back-project continuous pixel coordinates (..., 2) to world rays (o, unit d)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    x = (pixels[..., 0] - camera.cx) / camera.fx
    y = (pixels[..., 1] - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d = dirs_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def image_pixels(width: int, height: int) -> np.ndarray:
    """Integer (col, row) pairs for every pixel, row-major, shape (H, W, 2)."""
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols, rows], axis=-1)


def sample_patches(width: int, height: int, count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` square patches fully inside the image -> int array (count, size, size, 2) of (col, row)."""
    if size > min(width, height):
        raise ConfigError(f"patch size {size} exceeds image {width}x{height}")
    x0 = rng.integers(0, width - size + 1, size=count)
    y0 = rng.integers(0, height - size + 1, size=count)
    rows, cols = np.mgrid[0:size, 0:size]
    out = np.empty((count, size, size, 2), dtype=np.int64)
    out[..., 0] = x0[:, None, None] + cols
    out[..., 1] = y0[:, None, None] + rows
    return out


def ray_aabb(o, d, aabb_min, aabb_max):
    """Slab intersection.  Returns ``(t_near, t_far, hit)``; ``t_near`` is clamped
    at 0 for origins inside the box."""
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    lo = np.asarray(aabb_min, dtype=np.float64)
    hi = np.asarray(aabb_max, dtype=np.float64)
    parallel = d == 0
    safe = np.where(parallel, 1.0, d)
    t1 = (lo - o) / safe
    t2 = (hi - o) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    inside_slab = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def sample_points(t_near, t_far, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Stratified depths (R, n): one uniform draw per equal-width bin, or bin
    midpoints when ``rng`` is None."""
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if np.any(t_far <= t_near):
        raise ConfigError("t_far must exceed t_near")
    delta = (t_far - t_near) / n
    if rng is None:
        u = np.full((t_near.shape[0], n), 0.5)
    else:
        u = rng.random((t_near.shape[0], n))
    return t_near[:, None] + (np.arange(n)[None, :] + u) * delta[:, None]


def sample_deltas(t: np.ndarray, t_far: np.ndarray) -> np.ndarray:
    return np.concatenate([np.diff(t, axis=-1), (t_far - t[..., -1])[..., None]], axis=-1)


def volume_render_vjp(colors: np.ndarray, sigmas: np.ndarray, deltas: np.ndarray, background=None):
    """Alpha-composite samples along rays.

    ``colors`` (R, N, 3), ``sigmas`` (R, N), ``deltas`` (R, N).  Returns
    ``((pixel, alpha, weights), pullback)``; ``pixel = C + (1 - alpha) * background``.
    ``pullback(g_pixel)`` returns ``(g_colors, g_sigmas)``.
    """
    tau = sigmas * deltas
    cum = np.cumsum(tau, axis=-1)
    T_next = np.exp(-cum)  # T_{i+1}
    T = np.concatenate([np.ones_like(tau[..., :1]), T_next[..., :-1]], axis=-1)
    weights = T - T_next  # = T_i (1 - exp(-tau_i))
    rgb = np.einsum("rn,rnc->rc", weights, colors)
    alpha = 1.0 - T_next[..., -1]
    bg = np.zeros(3, dtype=colors.dtype) if background is None else np.asarray(background, dtype=colors.dtype)
    pixel = rgb + (1.0 - alpha)[..., None] * bg

    def pullback(g_pixel):
        g_colors = weights[..., None] * g_pixel[..., None, :]
        u = np.einsum("rnc,rc->rn", colors - bg, g_pixel)
        wu = weights * u
        # suffix sums of w_k u_k for k > i
        tail = np.cumsum(wu[..., ::-1], axis=-1)[..., ::-1] - wu
        g_tau = T_next * u - tail
        return g_colors, g_tau * deltas

    return (pixel, alpha, weights), pullback


def volume_render(colors, sigmas, t, t_far, background=None):
    """Composite with depths ``t`` (R, N); the last interval ends at ``t_far``."""
    deltas = sample_deltas(np.asarray(t), np.asarray(t_far))
    (pixel, alpha, _), _ = volume_render_vjp(colors, sigmas, deltas, background)
    return pixel, alpha


def transmittance(sigmas, deltas) -> np.ndarray:
    tau = sigmas * deltas
    return np.exp(-np.concatenate([np.zeros_like(tau[..., :1]), np.cumsum(tau, axis=-1)], axis=-1))


def render_image(shared, subject, pose, camera, t, config=None, rng=None):
    """Render a full image (H, W, 3); see :func:`genvox.model.render_image`."""
    from .model import render_image as _render

    return _render(shared, subject, pose, camera, t, config, rng)
