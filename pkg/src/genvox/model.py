"""Model configuration, shared/per-subject state, and the full differentiable render pipeline.

Per sample point: pose refinement -> blend-weight deformation into canonical
space -> multi-distance sampling of general and individual voxels -> radiance
network -> volume compositing.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ParameterStore
from .deformation import (WeightNetSpec, deform_vjp, generate_weight_volume_vjp, init_weight_net,
                          skinning_log_prior)
from .errors import ConfigError
from .radiance import RadianceSpec, init_radiance, radiance_vjp
from .renderer import (Camera, RenderConfig, generate_rays, image_pixels, pixel_centers, ray_aabb,
                       sample_deltas, sample_points, volume_render_vjp)
from .skeleton import BoneTransforms, Pose, PoseRefineSpec, Skeleton, init_pose_refine, \
    obs_to_canonical_transforms, posed_segments, refine_pose_vjp, segment_distances
from .voxels import VoxelGrid, mdi_sample_vjp, validate_scales

SHARED_COMPONENTS = ("general_voxels", "radiance", "weight_net", "pose_refine")


@dataclass
class ModelConfig:
    K: int = 8
    aabb_min: Sequence[float] = (-1.0, -1.0, -1.0)
    aabb_max: Sequence[float] = (1.0, 1.0, 1.0)
    voxel_dims: Sequence[int] = (160, 160, 160)
    voxel_channels: int = 6
    scales: Sequence[int] = (1, 2, 4)
    feature_freqs: int = 2
    time_freqs: int = 4
    coord_freqs: int = 10
    dir_freqs: int = 4
    radiance_width: int = 128
    radiance_depth: int = 4
    color_width: int = 64
    pose_hidden: Sequence[int] = (256, 256, 256)
    refine_translation: bool = True
    embed_dim: int = 128
    weight_expand: int = 1024
    weight_channels: Sequence[int] = (256, 128, 64)
    weight_kernel: int = 4
    weight_final_scale: float = 0.01
    weight_sample_space: str = "canonical"
    weight_prior: bool = True
    prior_sigma: float = 0.1
    prior_background: float = 0.05
    body_pad: float = 0.15
    cull_radius: Optional[float] = None
    dtype: str = "float32"

    def __post_init__(self):
        self.aabb_min = tuple(float(v) for v in self.aabb_min)
        self.aabb_max = tuple(float(v) for v in self.aabb_max)
        self.voxel_dims = tuple(int(v) for v in self.voxel_dims)
        self.scales = tuple(int(v) for v in self.scales)
        self.pose_hidden = tuple(int(v) for v in self.pose_hidden)
        self.weight_channels = tuple(int(v) for v in self.weight_channels)
        if len(self.voxel_dims) != 3 or min(self.voxel_dims) < 2:
            raise ConfigError(f"voxel_dims must be three values >= 2, got {self.voxel_dims}")
        if not all(a < b for a, b in zip(self.aabb_min, self.aabb_max)):
            raise ConfigError("aabb_min must be below aabb_max on every axis")
        validate_scales(self.scales, self.voxel_dims)
        if self.weight_sample_space not in ("canonical", "observation"):
            raise ConfigError(f"unknown weight_sample_space {self.weight_sample_space!r}")
        if self.cull_radius is not None and self.cull_radius <= 0:
            raise ConfigError("cull_radius must be positive (or None to disable)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def feature_dim(self) -> int:
        return len(self.scales) * self.voxel_channels

    @property
    def radiance_spec(self) -> RadianceSpec:
        return RadianceSpec(self.feature_dim, self.feature_freqs, self.time_freqs, self.coord_freqs,
                            self.dir_freqs, self.radiance_width, self.radiance_depth, self.color_width)

    @property
    def weight_spec(self) -> WeightNetSpec:
        return WeightNetSpec(self.K, self.embed_dim, self.weight_expand, self.weight_channels,
                             self.weight_kernel, self.weight_final_scale)

    @property
    def pose_spec(self) -> PoseRefineSpec:
        return PoseRefineSpec(self.K, self.pose_hidden, self.refine_translation)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


class SharedState:
    """Parameters shared across subjects: general voxels, radiance network,
    pose-refinement network and the blend-weight decoder."""

    def __init__(self, config: ModelConfig, store: ParameterStore):
        self.config = config
        self.store = store

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "SharedState":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        store = ParameterStore()
        store.add("general_voxels", np.zeros((*config.voxel_dims, config.voxel_channels), dtype=dt))
        for name, v in init_radiance(rng, config.radiance_spec, dt).items():
            store.add("radiance." + name, v)
        for name, v in init_weight_net(rng, config.weight_spec, dt).items():
            store.add("weight_net." + name, v)
        for name, v in init_pose_refine(rng, config.pose_spec, dt).items():
            store.add("pose_refine." + name, v)
        return cls(config, store)

    @property
    def general_grid(self) -> VoxelGrid:
        return VoxelGrid(self.store["general_voxels"], self.config.aabb_min, self.config.aabb_max)

    def component_names(self, component: str):
        if component == "general_voxels":
            return ["general_voxels"]
        return self.store.names(component + ".")

    def copy(self) -> "SharedState":
        return SharedState(self.config, self.store.copy())


class SubjectState:
    """Per-subject parameters: individual voxels and deformation embedding.

    Both start at zero.  The rest skeleton supplies the fixed skinning prior.
    """

    def __init__(self, config: ModelConfig, store: ParameterStore, skeleton: Skeleton, subject_id: str = "0"):
        self.config = config
        self.store = store
        self.skeleton = skeleton
        self.subject_id = subject_id
        self._log_prior = None

    @classmethod
    def create(cls, config: ModelConfig, skeleton: Skeleton, subject_id: str = "0") -> "SubjectState":
        if skeleton.K != config.K:
            raise ConfigError(f"skeleton has {skeleton.K} bones, model expects {config.K}")
        dt = config.np_dtype
        store = ParameterStore()
        store.add("individual_voxels", np.zeros((*config.voxel_dims, config.voxel_channels), dtype=dt))
        store.add("embedding", np.zeros(config.embed_dim, dtype=dt))
        return cls(config, store, skeleton, subject_id)

    @property
    def individual_grid(self) -> VoxelGrid:
        return VoxelGrid(self.store["individual_voxels"], self.config.aabb_min, self.config.aabb_max)

    @property
    def log_prior(self) -> Optional[np.ndarray]:
        if not self.config.weight_prior:
            return None
        if self._log_prior is None:
            c = self.config
            self._log_prior = skinning_log_prior(
                self.skeleton, np.array(c.aabb_min), np.array(c.aabb_max), c.weight_spec.volume_res,
                c.prior_sigma, c.prior_background).astype(c.np_dtype)
        return self._log_prior

    def copy(self) -> "SubjectState":
        out = SubjectState(self.config, self.store.copy(), self.skeleton, self.subject_id)
        out._log_prior = self._log_prior
        return out


def posed_bounds(skeleton: Skeleton, pose: Pose, pad: float) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around the posed bone segments, padded by ``pad``."""
    pts = np.concatenate(posed_segments(skeleton, pose))
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def canonical_aabb(skeletons: Sequence[Skeleton], pad: float, margin: float = 0.1):
    """Tight box around the rest-pose bodies, padded by ``pad``, then grown by
    ``margin`` of its extent on each side."""
    pts = np.concatenate([np.concatenate([s.rest_joints, s.rest_tails]) for s in skeletons])
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    ext = hi - lo
    return lo - margin * ext, hi + margin * ext


@dataclass
class FrameInput:
    pose: Pose
    timestamp: float
    camera: Camera


class RenderPass:
    """Forward evaluation of a batch of rays for one frame with a matching backward."""

    def __init__(self, shared: SharedState, subject: SubjectState, frame: FrameInput,
                 pixels: np.ndarray, render: RenderConfig, rng: Optional[np.random.Generator],
                 volume: Optional[np.ndarray] = None):
        cfg = shared.config
        dt = cfg.np_dtype
        self.cfg = cfg
        self.shared, self.subject = shared, subject
        skeleton = subject.skeleton
        o, d = generate_rays(frame.camera, pixel_centers(pixels[:, 0], pixels[:, 1]))
        lo, hi = posed_bounds(skeleton, frame.pose, cfg.body_pad)
        t_near, t_far, hit = ray_aabb(o, d, lo, hi)
        self.n_rays = o.shape[0]
        self.hit = hit
        bg = np.asarray(render.background, dtype=dt)
        self.bg = bg
        self.pixels = np.broadcast_to(bg, (self.n_rays, 3)).copy()
        self.n_hit = int(hit.sum())
        self.n_points = 0
        if self.n_hit == 0:
            self._pull = None
            return
        N = render.n_samples
        t = sample_points(t_near[hit], t_far[hit], N, rng if render.stratified else None)
        deltas = sample_deltas(t, t_far[hit]).astype(dt)
        x_all = (o[hit, None, :] + t[..., None] * d[hit, None, :]).reshape(-1, 3)
        if cfg.cull_radius is not None:
            # samples far from every posed bone are treated as empty space
            keep = np.flatnonzero(segment_distances(x_all, *posed_segments(skeleton, frame.pose)).min(axis=1)
                                  <= cfg.cull_radius)
        else:
            keep = np.arange(x_all.shape[0])
        n_all = x_all.shape[0]
        x = x_all[keep].astype(dt)
        dirs = np.repeat(d[hit], N, axis=0)[keep].astype(dt)

        p = shared.store
        base = obs_to_canonical_transforms(skeleton, frame.pose)
        transforms, pose_pb, _ = refine_pose_vjp(p.subset("pose_refine."), frame.pose, base,
                                                 cfg.refine_translation)
        transforms = BoneTransforms(transforms.R.astype(dt), transforms.T.astype(dt))
        if volume is None:
            volume, vol_pb = weight_volume_vjp(shared, subject)
        else:
            vol_pb = None
        (x_c, conf), def_pb = deform_vjp(volume, cfg.aabb_min, cfg.aabb_max, x, transforms,
                                         cfg.weight_sample_space)
        vg, vg_pb = mdi_sample_vjp(shared.general_grid, x_c, cfg.scales)
        vi, vi_pb = mdi_sample_vjp(subject.individual_grid, x_c, cfg.scales)
        (color, sigma_raw), rad_pb = radiance_vjp(p.subset("radiance."), cfg.radiance_spec, vg, vi,
                                                  np.asarray(frame.timestamp, dtype=dt), x, dirs)
        colors = np.zeros((n_all, 3), dtype=dt)
        sigmas = np.zeros(n_all, dtype=dt)
        colors[keep] = color
        sigmas[keep] = sigma_raw * conf
        (pix, alpha, weights), vr_pb = volume_render_vjp(colors.reshape(-1, N, 3), sigmas.reshape(-1, N),
                                                         deltas, bg)
        self.pixels[hit] = pix
        self.alpha = alpha
        self.n_points = int(keep.size)

        def pull(g_pixels):
            grads: Dict[str, np.ndarray] = {}
            g_color, g_sigma = vr_pb(g_pixels[hit].astype(dt))
            g_color = g_color.reshape(-1, 3)[keep]
            g_sigma = g_sigma.reshape(-1)[keep]
            g_sraw = g_sigma * conf
            g_conf = g_sigma * sigma_raw
            g_in, g_rad = rad_pb(g_color, g_sraw)
            for k, v in g_rad.items():
                grads["radiance." + k] = v
            g_xc_g, g_vox_g = vg_pb(g_in["v_general"])
            g_xc_i, g_vox_i = vi_pb(g_in["v_individual"])
            grads["general_voxels"] = g_vox_g
            grads["individual_voxels"] = g_vox_i
            g_vol, g_R, g_T = def_pb(g_xc_g + g_xc_i, g_conf)
            if vol_pb is None:
                raise ConfigError("backward through a pass built with a precomputed weight volume")
            g_z, g_wn = vol_pb(g_vol)
            grads["embedding"] = g_z
            for k, v in g_wn.items():
                grads["weight_net." + k] = v
            for k, v in pose_pb(g_R, g_T).items():
                grads["pose_refine." + k] = v
            return grads

        self._pull = pull

    def backward(self, g_pixels: np.ndarray) -> Dict[str, np.ndarray]:
        """Cotangent of the (n_rays, 3) pixels -> gradients keyed by parameter name."""
        if self._pull is None:
            return {}
        return self._pull(g_pixels)


def weight_volume_vjp(shared: SharedState, subject: SubjectState):
    return generate_weight_volume_vjp(shared.store.subset("weight_net."), subject.store["embedding"],
                                      shared.config.weight_spec, subject.log_prior)


def accumulate(grads: Dict[str, np.ndarray], shared: SharedState, subject: SubjectState) -> None:
    for name, g in grads.items():
        store = shared.store if name in shared.store else subject.store
        store.accumulate({name: g.astype(store[name].dtype, copy=False)})


def render_pixels(shared, subject, frame: FrameInput, pixels, render: RenderConfig, rng=None,
                  chunk: int = 2048) -> np.ndarray:
    """Forward-only render of integer pixel coordinates (n, 2)."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    out = np.empty((pixels.shape[0], 3), dtype=shared.config.np_dtype)
    volume = weight_volume_vjp(shared, subject)[0]
    for s in range(0, pixels.shape[0], chunk):
        rp = RenderPass(shared, subject, frame, pixels[s:s + chunk], render, rng, volume)
        out[s:s + chunk] = rp.pixels
    return out


def render_image(shared, subject, pose: Pose, camera: Camera, t: float, config: RenderConfig = None,
                 rng=None) -> np.ndarray:
    """Full image (H, W, 3).  Deterministic (midpoint sampling) when ``rng`` is None
    or ``config.stratified`` is False."""
    config = config or RenderConfig()
    if rng is None:
        config = dataclasses.replace(config, stratified=False)
    pix = image_pixels(camera.width, camera.height).reshape(-1, 2)
    img = render_pixels(shared, subject, FrameInput(pose, t, camera), pix, config, rng)
    return img.reshape(camera.height, camera.width, 3)
