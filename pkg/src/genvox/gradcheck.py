"""Registry of differentiable blocks with small double-precision instances for
finite-difference checking.

Each builder takes a seeded generator and returns ``(apply, params, inputs,
wrt_inputs)`` in the form :func:`genvox.autodiff.check_gradients` expects.
"""
from __future__ import annotations

import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import GradCheckReport, check_gradients
from .deformation import WeightNetSpec, deform_vjp, generate_weight_volume_vjp, init_weight_net
from .encoding import positional_encode_vjp
from .layers import linear_vjp
from .losses import PerceptualNet, mse_loss_vjp, perceptual_loss_vjp
from .radiance import RadianceSpec, init_radiance, radiance_vjp
from .renderer import volume_render_vjp
from .skeleton import BoneTransforms, Pose, PoseRefineSpec, init_pose_refine, refine_pose_vjp, rodrigues_vjp
from .voxels import VoxelGrid, mdi_sample_vjp, trilinear_sample_vjp

logger = logging.getLogger(__name__)

LO = np.array([-1.0, -0.8, -0.6])
HI = np.array([0.9, 1.0, 0.7])


def _interior_points(rng, n, lo=LO, hi=HI, margin=0.05):
    span = hi - lo
    return lo + span * margin + rng.random((n, 3)) * span * (1 - 2 * margin)


def _random_rotations(rng, k, max_angle=1.2):
    out = []
    for _ in range(k):
        w = rng.normal(size=3)
        w *= rng.uniform(0.1, max_angle) / np.linalg.norm(w)
        out.append(rodrigues_vjp(w)[0])
    return np.stack(out)


def block_encoding(rng):
    def apply(params, inputs):
        y, pb = positional_encode_vjp(inputs["x"], 4)
        return y, lambda g: ({"x": pb(g)}, {})

    return apply, {}, {"x": rng.uniform(-1, 1, (5, 3))}, ("x",)


def block_linear(rng):
    W = rng.normal(size=(4, 5))
    b = rng.normal(size=4)

    def apply(params, inputs):
        y, pb = linear_vjp(params["W"], params["b"], inputs["x"])

        def pull(g):
            gx, gW, gb = pb(g)
            return {"x": gx}, {"W": gW, "b": gb}

        return y, pull

    return apply, {"W": W, "b": b}, {"x": rng.normal(size=(3, 5))}, ("x",)


def _grid_block(scales):
    def build(rng):
        data = rng.normal(size=(11, 10, 12, 3))

        def apply(params, inputs):
            grid = VoxelGrid(params["data"], LO, HI)
            if scales == (1,):
                y, pb = trilinear_sample_vjp(grid, inputs["points"])
            else:
                y, pb = mdi_sample_vjp(grid, inputs["points"], scales)

            def pull(g):
                gp, gd = pb(g)
                return {"points": gp}, {"data": gd}

            return y, pull

        return apply, {"data": data}, {"points": _interior_points(rng, 12)}, ("points",)

    return build


def block_rodrigues(rng):
    w = rng.normal(size=(4, 3))
    w[0] *= 1e-3 / np.linalg.norm(w[0])  # small-angle branch

    def apply(params, inputs):
        R, pb = rodrigues_vjp(inputs["omega"])
        return R, lambda g: ({"omega": pb(g)}, {})

    return apply, {}, {"omega": w}, ("omega",)


def block_pose_refine(rng):
    K = 3
    spec = PoseRefineSpec(K, (8, 8))
    params = init_pose_refine(rng, spec)
    # the output layer starts at zero; perturb it so every path is exercised
    params["2.weight"] = rng.normal(scale=0.1, size=params["2.weight"].shape)
    params["2.bias"] = rng.normal(scale=0.1, size=params["2.bias"].shape)
    omega = rng.normal(scale=0.5, size=(K, 3))
    base = BoneTransforms(_random_rotations(rng, K), rng.normal(size=(K, 3)))

    def apply(p, inputs):
        pose = Pose(omega, np.zeros(3))
        corrected, pb, _ = refine_pose_vjp(p, pose, base, True)
        return (corrected.R, corrected.T), lambda g: ({}, pb(g[0], g[1]))

    return apply, params, {}, ()


def block_weight_net(rng):
    spec = WeightNetSpec(K=2, embed_dim=4, expand=6, channels=(3, 2), kernel=4, final_scale=1.0)
    params = init_weight_net(rng, spec)
    prior = rng.normal(size=(spec.volume_res,) * 3 + (spec.K + 1,))

    def apply(p, inputs):
        vol, pb = generate_weight_volume_vjp(p, inputs["z"], spec, prior)

        def pull(g):
            gz, grads = pb(g)
            return {"z": gz}, grads

        return vol, pull

    return apply, params, {"z": rng.normal(size=4)}, ("z",)


def _deform_block(space):
    def build(rng):
        K = 3
        volume = rng.uniform(0.05, 1.0, (6, 7, 5, K + 1))
        R = _random_rotations(rng, K, 0.4)
        T = rng.normal(scale=0.05, size=(K, 3))
        x = _interior_points(rng, 10, margin=0.25)

        def apply(params, inputs):
            tr = BoneTransforms(inputs["R"], inputs["T"])
            (xc, conf), pb = deform_vjp(params["volume"], LO, HI, inputs["x"], tr, space)

            def pull(g):
                g_vol, g_R, g_T = pb(g[0], g[1])
                return {"R": g_R, "T": g_T}, {"volume": g_vol}

            return (xc, conf), pull

        return apply, {"volume": volume}, {"x": x, "R": R, "T": T}, ("R", "T")

    return build


def block_radiance(rng):
    spec = RadianceSpec(feature_dim=4, width=8, depth=3, color_width=6)
    params = init_radiance(rng, spec)
    P = 6
    inputs = {
        "v_general": rng.normal(scale=0.5, size=(P, 4)),
        "v_individual": rng.normal(scale=0.5, size=(P, 4)),
        "t": np.array(rng.random()),
        "x_obs": rng.uniform(-1, 1, (P, 3)),
        "d": rng.normal(size=(P, 3)),
    }
    inputs["d"] /= np.linalg.norm(inputs["d"], axis=1, keepdims=True)

    def apply(p, inp):
        (c, s), pb = radiance_vjp(p, spec, inp["v_general"], inp["v_individual"], inp["t"], inp["x_obs"], inp["d"])

        def pull(g):
            gi, grads = pb(g[0], g[1])
            gi = dict(gi)
            gi["t"] = np.sum(gi["t"])
            return gi, grads

        return (c, s), pull

    return apply, params, inputs, ("v_general", "v_individual", "t", "x_obs", "d")


def block_volume_render(rng):
    R, N = 4, 7
    inputs = {
        "colors": rng.random((R, N, 3)),
        "sigmas": rng.uniform(0, 3, (R, N)),
        "deltas": rng.uniform(0.05, 0.3, (R, N)),
    }
    bg = rng.random(3)

    def apply(params, inp):
        (pix, _, _), pb = volume_render_vjp(inp["colors"], inp["sigmas"], inp["deltas"], bg)

        def pull(g):
            gc, gs_delta = pb(g)
            # pullback returns d/d(sigma) already scaled by delta
            return {"colors": gc, "sigmas": gs_delta}, {}

        return pix, pull

    return apply, {}, inputs, ("colors", "sigmas")


def block_mse(rng):
    gt = rng.random((2, 5, 5, 3))

    def apply(params, inp):
        v, pb = mse_loss_vjp(inp["pred"], gt)
        return np.array(v), lambda g: ({"pred": pb(float(g))}, {})

    return apply, {}, {"pred": rng.random((2, 5, 5, 3))}, ("pred",)


def block_perceptual(rng):
    net = PerceptualNet.random(int(rng.integers(1 << 16)))
    gt = rng.random((2, 8, 8, 3))

    def apply(params, inp):
        v, pb = perceptual_loss_vjp(inp["pred"], gt, net)
        return np.array(v), lambda g: ({"pred": pb(float(g))}, {})

    return apply, {}, {"pred": rng.random((2, 8, 8, 3))}, ("pred",)


def block_pipeline(rng):
    """A tiny full model: pose refinement through compositing for a few rays."""
    from .model import FrameInput, ModelConfig, RenderPass, SharedState, SubjectState
    from .renderer import Camera, RenderConfig
    from .synthdata import humanoid_skeleton

    skel = humanoid_skeleton()
    cfg = ModelConfig(aabb_min=(-1.0, -1.1, -0.5), aabb_max=(1.0, 1.0, 0.5), voxel_dims=(9, 9, 9),
                      voxel_channels=2, scales=(1, 2), radiance_width=8, radiance_depth=2, color_width=4,
                      pose_hidden=(6,), embed_dim=3, weight_expand=4, weight_channels=(2,),
                      weight_final_scale=1.0, dtype="float64")
    shared = SharedState.create(cfg, int(rng.integers(1 << 16)))
    subject = SubjectState.create(cfg, skel)
    for store, scale in ((shared.store, 0.3), (subject.store, 0.3)):
        for name, v in store.items():
            if name.endswith("voxels") or name == "embedding" or name.startswith("pose_refine.1"):
                v[...] = rng.normal(scale=scale, size=v.shape)
    pose = Pose(rng.normal(scale=0.2, size=(skel.K, 3)), rng.normal(scale=0.02, size=3))
    cam = Camera.look_at((0.3, 0.1, 3.0), (0.0, -0.1, 0.0), (0, 1, 0), 16, 16, 40.0)
    frame = FrameInput(pose, 0.4, cam)
    pixels = np.array([[8, 8], [6, 4], [9, 11], [7, 6]])
    render = RenderConfig(n_samples=6, background=(0.2, 0.3, 0.4), stratified=False)
    params = {**dict(shared.store.items()), **dict(subject.store.items())}

    def apply(p, inputs):
        rp = RenderPass(shared, subject, frame, pixels, render, None)
        return rp.pixels.copy(), lambda g: ({}, rp.backward(g))

    return apply, params, {}, ()


BLOCKS: Dict[str, Callable] = {
    "encoding": block_encoding,
    "linear": block_linear,
    "trilinear": _grid_block((1,)),
    "mdi": _grid_block((1, 2, 4)),
    "rodrigues": block_rodrigues,
    "pose_refine": block_pose_refine,
    "weight_volume": block_weight_net,
    "deform": _deform_block("canonical"),
    "deform_observation": _deform_block("observation"),
    "radiance": block_radiance,
    "volume_render": block_volume_render,
    "mse": block_mse,
    "perceptual": block_perceptual,
    "pipeline": block_pipeline,
}


# the full pipeline re-renders every ray per probe, so it gets fewer probes per tensor
MAX_ENTRIES = {"pipeline": 32}


def check_block(name: str, seed: int, fd_step: float = 1e-5, tol: float = 1e-4,
                max_entries: Optional[int] = None) -> GradCheckReport:
    if max_entries is None:
        max_entries = MAX_ENTRIES.get(name, 64)
    rng = np.random.default_rng([seed, sorted(BLOCKS).index(name)])
    apply, params, inputs, wrt = BLOCKS[name](rng)
    return check_gradients(name, apply, params, inputs, seed=seed, fd_step=fd_step, tol=tol,
                           wrt_inputs=wrt, max_entries=max_entries)


def run_suite(seeds: Sequence[int], blocks: Sequence[str] = None, tol: float = 1e-4) -> List[GradCheckReport]:
    blocks = list(blocks or BLOCKS)
    out = []
    t0 = time.time()
    for seed in seeds:
        for name in blocks:
            rep = check_block(name, seed, tol=tol)
            logger.info("seed %d %-18s max rel err %.2e %s", seed, name, rep.max_rel_err,
                        "ok" if rep.passed else "FAIL " + rep.worst)
            out.append(rep)
    logger.info("gradient suite: %d checks in %.1fs", len(out), time.time() - t0)
    return out
