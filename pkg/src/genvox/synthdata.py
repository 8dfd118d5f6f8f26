"""Procedural capsule bodies with analytic density/color, used as ground truth.

Ground-truth images go through the same compositor as the learned model, so
any gap between them comes from the model and not from the integrator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .dataset import FrameRecord, SubjectDataset, save_manifest, write_png
from .errors import ConfigError
from .renderer import (Camera, RenderConfig, generate_rays, image_pixels, pixel_centers, ray_aabb,
                       sample_deltas, sample_points, volume_render_vjp)
from .skeleton import Pose, Skeleton, segment_distances
from .skeleton import posed_segments as skeleton_segments

logger = logging.getLogger(__name__)

# name, parent, joint, tail  (y up, meters)
HUMANOID = [
    ("torso", -1, (0.0, 0.0, 0.0), (0.0, 0.5, 0.0)),
    ("head", 0, (0.0, 0.5, 0.0), (0.0, 0.72, 0.0)),
    ("l_upper_arm", 0, (0.2, 0.45, 0.0), (0.45, 0.45, 0.0)),
    ("l_forearm", 2, (0.45, 0.45, 0.0), (0.7, 0.45, 0.0)),
    ("r_upper_arm", 0, (-0.2, 0.45, 0.0), (-0.45, 0.45, 0.0)),
    ("r_forearm", 4, (-0.45, 0.45, 0.0), (-0.7, 0.45, 0.0)),
    ("l_leg", 0, (0.1, 0.0, 0.0), (0.1, -0.8, 0.0)),
    ("r_leg", 0, (-0.1, 0.0, 0.0), (-0.1, -0.8, 0.0)),
]
BASE_RADII = (0.13, 0.1, 0.055, 0.05, 0.055, 0.05, 0.075, 0.075)


def humanoid_skeleton(scales: Optional[Sequence[float]] = None) -> Skeleton:
    """Eight-bone humanoid; ``scales`` stretch each bone's own segment (children
    attached to a bone move with its stretch)."""
    K = len(HUMANOID)
    scales = np.ones(K) if scales is None else np.asarray(scales, dtype=np.float64)
    parent = [b[1] for b in HUMANOID]
    j0 = np.array([b[2] for b in HUMANOID])
    t0 = np.array([b[3] for b in HUMANOID])
    joints = np.zeros((K, 3))
    tails = np.zeros((K, 3))
    for i in range(K):
        p = parent[i]
        if p < 0:
            joints[i] = j0[i]
        else:
            joints[i] = joints[p] + scales[p] * (j0[i] - j0[p])
        tails[i] = joints[i] + scales[i] * (t0[i] - j0[i])
    return Skeleton(parent, joints, tails, [b[0] for b in HUMANOID])


@dataclass
class SyntheticSubject:
    skeleton: Skeleton
    radii: np.ndarray
    colors: np.ndarray
    softness: float = 0.02
    sigma_max: float = 40.0
    seed: int = 0
    subject_id: str = "0"
    limb_scales: np.ndarray = field(default_factory=lambda: np.ones(len(HUMANOID)))

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if np.any(self.radii <= 0):
            raise ConfigError("capsule radii must be positive")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ConfigError("colors must lie in [0, 1]")

    @property
    def bounds_pad(self) -> float:
        return float(self.radii.max() + self.softness)

    def to_dict(self) -> dict:
        return {
            "radii": self.radii.tolist(), "colors": self.colors.tolist(), "softness": self.softness,
            "sigma_max": self.sigma_max, "seed": self.seed, "limb_scales": self.limb_scales.tolist(),
        }


def make_subjects(count: int, base_seed: int = 0, length_var: float = 0.2, radius_var: float = 0.3) -> List[SyntheticSubject]:
    """Seeded subjects with limb lengths within +-length_var, radii within
    +-radius_var of the base humanoid, and random per-bone colors."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    out = []
    for n in range(count):
        rng = np.random.default_rng([base_seed, n])
        scales = rng.uniform(1 - length_var, 1 + length_var, len(HUMANOID))
        radii = np.asarray(BASE_RADII) * rng.uniform(1 - radius_var, 1 + radius_var, len(HUMANOID))
        colors = rng.uniform(0.15, 0.95, (len(HUMANOID), 3))
        out.append(SyntheticSubject(humanoid_skeleton(scales), radii, colors, seed=base_seed,
                                    subject_id=str(n), limb_scales=scales))
    return out


def _line_segment_distances(o: np.ndarray, d: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances (R, K) between lines ``o + t d`` (unit d) and segments a[k] -> b[k]."""
    def perp(w):
        return w - np.einsum("rkc,rc->rk", w, d)[..., None] * d[:, None, :]

    u = perp(a[None] - o[:, None, :])
    v = perp(np.broadcast_to((b - a)[None], u.shape))
    vv = np.maximum(np.sum(v * v, axis=-1), 1e-12)
    s = np.clip(-np.sum(u * v, axis=-1) / vv, 0.0, 1.0)
    return np.linalg.norm(u + s[..., None] * v, axis=-1)


def smoothstep(e0, e1, x):
    u = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return u * u * (3 - 2 * u)


def posed_segments(subject: SyntheticSubject, pose: Pose):
    return skeleton_segments(subject.skeleton, pose)


def gt_field(subject: SyntheticSubject, pose: Pose, x_world: np.ndarray, _segments=None):
    """Analytic color (P, 3) and density (P,) at world points.

    Signed distance to the nearest posed capsule drives a smoothstep falloff:
    full density at ``-softness`` and beyond, half at the surface, zero from
    ``+softness`` out.  Color is that of the nearest capsule's bone.
    """
    x = np.atleast_2d(np.asarray(x_world, dtype=np.float64))
    a, b = posed_segments(subject, pose) if _segments is None else _segments
    sd = segment_distances(x, a, b) - subject.radii[None, :]
    nearest = np.argmin(sd, axis=1)
    m = sd[np.arange(x.shape[0]), nearest]
    sigma = subject.sigma_max * (1.0 - smoothstep(-subject.softness, subject.softness, m))
    return subject.colors[nearest], sigma


def render_gt(subject: SyntheticSubject, pose: Pose, camera: Camera, config: Optional[RenderConfig] = None,
              chunk: int = 4096) -> np.ndarray:
    """Deterministic (midpoint) render of the analytic field -> (H, W, 3)."""
    config = config or RenderConfig(n_samples=256, stratified=False)
    if config.n_samples < 256:
        raise ConfigError("ground-truth renders need at least 256 samples per ray")
    segs = posed_segments(subject, pose)
    pts = np.concatenate(segs)
    pad = subject.bounds_pad
    lo, hi = pts.min(axis=0) - pad, pts.max(axis=0) + pad
    pix = image_pixels(camera.width, camera.height).reshape(-1, 2)
    o, d = generate_rays(camera, pixel_centers(pix[:, 0], pix[:, 1]))
    t_near, t_far, hit = ray_aabb(o, d, lo, hi)
    # rays whose line stays outside every capsule's support see zero density
    hit &= np.any(_line_segment_distances(o, d, *segs) <= subject.radii + subject.softness, axis=1)
    out = np.broadcast_to(config.background, (pix.shape[0], 3)).copy()
    idx = np.flatnonzero(hit)
    N = config.n_samples
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        t = sample_points(t_near[sel], t_far[sel], N, None)
        x = (o[sel, None, :] + t[..., None] * d[sel, None, :]).reshape(-1, 3)
        c, sigma = gt_field(subject, pose, x, segs)
        (pixel, _, _), _ = volume_render_vjp(c.reshape(-1, N, 3), sigma.reshape(-1, N),
                                             sample_deltas(t, t_far[sel]), config.background)
        out[sel] = pixel
    return out.reshape(camera.height, camera.width, 3)


@dataclass
class MotionSpec:
    """Smooth sinusoidal joint swings plus one full turn of the root about +y."""

    arm_raise: float = 0.5
    elbow_bend: float = 0.7
    leg_swing: float = 0.4
    head_nod: float = 0.2
    turns: float = 1.0
    cycles: float = 2.0

    def pose(self, t: float, frames: int, phase: float = 0.0) -> Pose:
        w = 2 * np.pi * self.cycles * t + phase
        omega = np.zeros((len(HUMANOID), 3))
        # keep the last frame short of a full turn so it differs from the first
        yaw = 2 * np.pi * self.turns * t * (frames - 1) / frames if frames > 1 else 0.0
        omega[0] = (0.0, yaw, 0.0)
        omega[1] = (self.head_nod * np.sin(w), 0.0, 0.0)
        omega[2] = (0.0, 0.0, -self.arm_raise * (0.5 + 0.5 * np.sin(w)))
        omega[3] = (0.0, self.elbow_bend * (0.5 + 0.5 * np.sin(w + 1.0)), 0.0)
        omega[4] = (0.0, 0.0, self.arm_raise * (0.5 + 0.5 * np.sin(w + np.pi)))
        omega[5] = (0.0, -self.elbow_bend * (0.5 + 0.5 * np.sin(w + 1.0 + np.pi)), 0.0)
        omega[6] = (self.leg_swing * np.sin(w), 0.0, 0.0)
        omega[7] = (-self.leg_swing * np.sin(w), 0.0, 0.0)
        return Pose(omega, (0.0, 0.03 * np.sin(2 * w), 0.0))


def camera_rig(count: int = 4, size: int = 64, distance: float = 3.6, elevation_deg: float = 10.0,
               fov_deg: float = 36.0, target=(0.0, -0.05, 0.0)) -> List[Camera]:
    """Cameras evenly spaced in azimuth, all looking at ``target``."""
    cams = []
    el = np.deg2rad(elevation_deg)
    for k in range(count):
        az = 2 * np.pi * k / count
        eye = np.asarray(target) + distance * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), size, size, fov_deg))
    return cams


def generate_subject_dataset(subject: SyntheticSubject, frames: int, cameras: Sequence[Camera],
                             motion: Optional[MotionSpec] = None, out_dir=None,
                             gt_config: Optional[RenderConfig] = None) -> SubjectDataset:
    """Render all frames from all cameras.  Camera 0 is the (monocular) training
    view; the rest form the evaluation split.  Writes to ``out_dir`` if given."""
    motion = motion or MotionSpec()
    gt_config = gt_config or RenderConfig(n_samples=256, stratified=False)
    phase = 0.37 * int(subject.subject_id) if subject.subject_id.isdigit() else 0.0
    records = []
    directory = None
    if out_dir is not None:
        directory = Path(out_dir) / f"subject_{subject.subject_id}"
        (directory / "images").mkdir(parents=True, exist_ok=True)
    ds = SubjectDataset(subject.subject_id, subject.skeleton, list(cameras), records, [], [],
                        np.asarray(gt_config.background), directory,
                        extra={"synthetic": subject.to_dict()})
    for f in range(frames):
        t = f / (frames - 1) if frames > 1 else 0.0
        pose = motion.pose(t, frames, phase)
        rec = FrameRecord(f, t, pose)
        for c, cam in enumerate(cameras):
            img = render_gt(subject, pose, cam, gt_config)
            rel = f"images/f{f:03d}_c{c}.png"
            rec.images[c] = rel
            if directory is not None:
                write_png(directory / rel, img)
                # keep the in-memory copy identical to what a reload sees
                img = np.round(np.clip(img, 0, 1) * 255.0) / 255.0
            ds.set_image(f, c, img)
            (ds.train if c == 0 else ds.eval).append((f, c))
        records.append(rec)
    if directory is not None:
        save_manifest(ds, directory)
    return ds


def generate_dataset(subjects: Sequence[SyntheticSubject], frames_per_subject: int = 20, cameras_per_frame: int = 4,
                     motion: Optional[MotionSpec] = None, out_dir=None, image_size: int = 64,
                     gt_config: Optional[RenderConfig] = None) -> List[SubjectDataset]:
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot write dataset to {out_dir}: {exc}") from exc
    cams = camera_rig(cameras_per_frame, image_size)
    out = []
    for s in subjects:
        logger.info("rendering subject %s", s.subject_id)
        out.append(generate_subject_dataset(s, frames_per_subject, cams, motion, out_dir, gt_config))
    return out


def foreground_fraction(img: np.ndarray, background=(0.0, 0.0, 0.0), tol: float = 1e-3) -> float:
    return float(np.mean(np.any(np.abs(img - np.asarray(background)) > tol, axis=-1)))
