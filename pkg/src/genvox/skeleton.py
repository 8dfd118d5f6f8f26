"""Bone hierarchy, forward kinematics, observation-to-canonical transforms and pose refinement."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .layers import init_mlp, mlp_vjp

_SMALL_ANGLE = 1e-2


@dataclass
class Skeleton:
    """Bones in topological order.  Bone ``i`` rotates about ``rest_joints[i]``
    and, for rendering purposes, spans the segment to ``rest_tails[i]``."""

    parent: np.ndarray
    rest_joints: np.ndarray
    rest_tails: Optional[np.ndarray] = None
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64).reshape(-1, 3)
        if self.rest_tails is None:
            self.rest_tails = self.rest_joints.copy()
        self.rest_tails = np.asarray(self.rest_tails, dtype=np.float64).reshape(-1, 3)
        K = len(self.parent)
        if self.rest_joints.shape[0] != K or self.rest_tails.shape[0] != K:
            raise ConfigError("parent, rest_joints and rest_tails must have one entry per bone")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ConfigError("skeleton needs exactly one root, at index 0")
        if any(self.parent[i] >= i for i in range(1, K)):
            raise ConfigError("bones must be in topological order (parent[i] < i)")
        if not self.names:
            self.names = [f"bone{i}" for i in range(K)]

    @property
    def K(self) -> int:
        return len(self.parent)

    def to_dict(self) -> dict:
        return {
            "parent": self.parent.tolist(),
            "rest_joints": self.rest_joints.tolist(),
            "rest_tails": self.rest_tails.tolist(),
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(d["parent"], d["rest_joints"], d.get("rest_tails"), list(d.get("names", [])))


@dataclass
class Pose:
    omega: np.ndarray  # (K, 3) axis-angle per joint
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(-1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    def joints(self, skeleton: Skeleton) -> np.ndarray:
        A = forward_kinematics(skeleton, self.root_translation, self.omega)
        return apply_transforms(A, skeleton.rest_joints)

    @classmethod
    def rest(cls, K: int) -> "Pose":
        return cls(np.zeros((K, 3)))


@dataclass
class BoneTransforms:
    """Per-bone rigid maps ``x -> R[i] @ x + T[i]``."""

    R: np.ndarray  # (K, 3, 3)
    T: np.ndarray  # (K, 3)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (P, 3) by every bone -> (K, P, 3)."""
        return np.einsum("kij,pj->kpi", self.R, points) + self.T[:, None, :]


def _skew(w):
    w = np.asarray(w)
    z = np.zeros(w.shape[:-1], dtype=w.dtype)
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], -1),
        np.stack([w[..., 2], z, -w[..., 0]], -1),
        np.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


def _rodrigues_coeffs(theta2):
    """sin t/t, (1-cos t)/t^2 and their derivatives divided by t."""
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    s, c = np.sin(t), np.cos(t)
    A = np.where(small, 1 - theta2 / 6 + theta2**2 / 120, s / t)
    B = np.where(small, 0.5 - theta2 / 24 + theta2**2 / 720, (1 - c) / t**2)
    dA = np.where(small, -1.0 / 3 + theta2 / 30 - theta2**2 / 840, (t * c - s) / t**3)
    dB = np.where(small, -1.0 / 12 + theta2 / 180 - theta2**2 / 6720, (t * s - 2 * (1 - c)) / t**4)
    return A, B, dA, dB


def rodrigues(omega) -> np.ndarray:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    return rodrigues_vjp(omega)[0]


def rodrigues_vjp(omega):
    omega = np.asarray(omega)
    if not np.issubdtype(omega.dtype, np.floating):
        omega = omega.astype(np.float64)
    theta2 = np.sum(omega * omega, axis=-1)
    A, B, dA, dB = _rodrigues_coeffs(theta2)
    A, B, dA, dB = (a.astype(omega.dtype)[..., None, None] for a in (A, B, dA, dB))
    K = _skew(omega)
    K2 = K @ K
    eye = np.eye(3, dtype=omega.dtype)
    R = eye + A * K + B * K2

    def pullback(gR):
        basis = _skew(np.eye(3, dtype=omega.dtype))  # (3, 3, 3): skew(e_j)
        g = np.zeros_like(omega)
        # terms independent of j
        gA = np.sum(gR * K, axis=(-2, -1))
        gB = np.sum(gR * K2, axis=(-2, -1))
        for j in range(3):
            Kj = basis[j]
            dK2 = Kj @ K + K @ Kj
            g[..., j] = (A[..., 0, 0] * np.sum(gR * Kj, axis=(-2, -1))
                         + B[..., 0, 0] * np.sum(gR * dK2, axis=(-2, -1))
                         + omega[..., j] * (dA[..., 0, 0] * gA + dB[..., 0, 0] * gB))
        return g

    return R, pullback


def _rigid(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def forward_kinematics(skeleton: Skeleton, root_translation, omega) -> np.ndarray:
    """World transforms (K, 4, 4) taking rest-pose points on each bone to the posed frame."""
    omega = np.asarray(omega, dtype=np.float64).reshape(skeleton.K, 3)
    Rs = rodrigues(omega)
    A = np.empty((skeleton.K, 4, 4))
    for i in range(skeleton.K):
        J = skeleton.rest_joints[i]
        local = _rigid(Rs[i], J - Rs[i] @ J)
        if skeleton.parent[i] < 0:
            A[i] = _rigid(np.eye(3), np.asarray(root_translation, dtype=np.float64)) @ local
        else:
            A[i] = A[skeleton.parent[i]] @ local
    return A


def apply_transforms(A: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-bone 4x4 transforms to per-bone points (K, 3)."""
    return np.einsum("kij,kj->ki", A[:, :3, :3], points) + A[:, :3, 3]


def segment_distances(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances (P, K) from points to K segments a[k] -> b[k]."""
    ab = b - a  # (K, 3)
    inv = 1.0 / np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    ap = [x[:, c, None] - a[None, :, c] for c in range(3)]  # 3 x (P, K)
    t = (ap[0] * ab[:, 0] + ap[1] * ab[:, 1] + ap[2] * ab[:, 2]) * inv
    np.clip(t, 0.0, 1.0, out=t)
    d2 = np.zeros_like(t)
    for c in range(3):
        r = ap[c] - t * ab[:, c]
        d2 += r * r
    return np.sqrt(d2)


def posed_segments(skeleton: Skeleton, pose: Pose):
    """World-space (joint, tail) endpoints of every bone, each (K, 3)."""
    A = forward_kinematics(skeleton, pose.root_translation, pose.omega)
    return apply_transforms(A, skeleton.rest_joints), apply_transforms(A, skeleton.rest_tails)


def obs_to_canonical_transforms(skeleton: Skeleton, pose: Pose) -> BoneTransforms:
    """Inverse of each bone's posed transform: observed point -> rest-pose point.

    The canonical frame is the rest (T-) pose, whose own transforms are the
    identity, so ``A_rest^i (A_obs^i)^-1`` reduces to the inverse.
    """
    A = forward_kinematics(skeleton, pose.root_translation, pose.omega)
    Rt = np.transpose(A[:, :3, :3], (0, 2, 1))
    T = -np.einsum("kij,kj->ki", Rt, A[:, :3, 3])
    return BoneTransforms(Rt.copy(), T)


# --------------------------------------------------------------------------
# pose refinement network


@dataclass(frozen=True)
class PoseRefineSpec:
    K: int
    hidden: Sequence[int] = (256, 256, 256)
    refine_translation: bool = True

    @property
    def sizes(self):
        out = 6 * self.K if self.refine_translation else 3 * self.K
        return (3 * self.K, *self.hidden, out)


def init_pose_refine(rng, spec: PoseRefineSpec, dtype=np.float64) -> Dict[str, np.ndarray]:
    """Hidden layers default-initialized; the output layer starts at zero so
    refinement is the identity."""
    return init_mlp(rng, spec.sizes, dtype=dtype, zero_last=True)


def refine_pose_vjp(params: Dict[str, np.ndarray], pose: Pose, base: BoneTransforms,
                    refine_translation: bool = True):
    """Compose a learned correction onto the bone transforms.

    ``R_c = R @ dR`` and ``T_c = T + dT`` where ``dR = rodrigues(d_omega)`` and
    ``(d_omega, dT)`` come from the MLP applied to the flattened joint rotations.
    Joint positions are untouched.  Returns ``(corrected, pullback)`` where the
    pullback maps ``(gR, gT)`` to parameter gradients.
    """
    dtype = params["0.weight"].dtype
    K = pose.omega.shape[0]
    x = pose.omega.reshape(1, -1).astype(dtype)
    out, mlp_pb = mlp_vjp(params, x)
    d_omega = out[0, :3 * K].reshape(K, 3)
    dT = out[0, 3 * K:].reshape(K, 3) if refine_translation else np.zeros((K, 3), dtype)
    dR, rod_pb = rodrigues_vjp(d_omega)
    Rb = base.R.astype(dtype)
    R = Rb @ dR
    T = base.T.astype(dtype) + dT
    corrected = BoneTransforms(R, T)

    def pullback(gR, gT):
        g_dR = np.transpose(Rb, (0, 2, 1)) @ gR
        g_omega = rod_pb(g_dR)
        g_out = g_omega.reshape(1, -1)
        if refine_translation:
            g_out = np.concatenate([g_out, gT.reshape(1, -1)], axis=1)
        _, grads = mlp_pb(g_out.astype(dtype))
        return grads

    return corrected, pullback, (d_omega, dT)


def refine_pose(params, pose: Pose, skeleton: Skeleton, refine_translation: bool = True) -> BoneTransforms:
    base = obs_to_canonical_transforms(skeleton, pose)
    return refine_pose_vjp(params, pose, base, refine_translation)[0]
