"""Acceptance suite: one test per headline criterion, each reporting a
PASS/FAIL line in the terminal summary.

The transfer benchmark (criteria 5 and 6) trains for roughly half an hour on a
single CPU core.
"""
import contextlib
import csv
import json
import os
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE, TINY_RENDER, tiny_model
from genvox.benchmark import BenchmarkConfig, run_benchmark
from genvox.checkpoint import load_checkpoint, resume_run, save_run
from genvox.cli import main
from genvox.config import toy_config
from genvox.deformation import deform
from genvox.gradcheck import BLOCKS, run_suite
from genvox.losses import psnr, ssim
from genvox.renderer import sample_deltas, sample_points, transmittance, volume_render
from genvox.skeleton import BoneTransforms, Pose, Skeleton, obs_to_canonical_transforms, segment_distances
from genvox.trainer import TrainConfig, pretrain
from genvox.voxels import VoxelGrid, mdi_sample, trilinear_sample

# Values observed on the first green benchmark run (seed 0, 5 subjects).
# Later runs must stay within a band around them.
PINNED_SCRATCH_PSNR = 23.34
PINNED_STEPS_TO_TARGET = 200
PSNR_BAND = 1.5


@contextlib.contextmanager
def criterion(number: int, title: str):
    detail = {}
    try:
        yield detail
    except BaseException:
        ACCEPTANCE.append(f"FAIL  [{number}] {title} {detail.get('info', '')}".rstrip())
        raise
    ACCEPTANCE.append(f"PASS  [{number}] {title} {detail.get('info', '')}".rstrip())


def test_1_gradient_suite():
    with criterion(1, "gradient suite, 10 seeds, rel tol 1e-4, <= 2 min") as d:
        t0 = time.time()
        reports = run_suite(range(10), sorted(BLOCKS), tol=1e-4)
        elapsed = time.time() - t0
        worst = max(r.max_rel_err for r in reports)
        d["info"] = f"({len(reports)} checks, worst {worst:.1e}, {elapsed:.0f}s)"
        assert {"encoding", "trilinear", "mdi", "pose_refine", "weight_volume", "deform", "radiance",
                "volume_render", "mse", "perceptual"} <= set(BLOCKS)
        assert all(r.passed for r in reports), [(r.block, r.worst) for r in reports if not r.passed]
        assert elapsed <= 120


def test_2_renderer_analytics():
    with criterion(2, "homogeneous medium within 1e-3, empty space gives background, monotone transmittance"):
        c = np.array([0.8, 0.3, 0.5])
        N = 1024
        for sigma, L in [(0.5, 1.0), (2.0, 1.5), (10.0, 0.7)]:
            t = sample_points(np.zeros(1), np.full(1, L), N)
            pix, _ = volume_render(np.broadcast_to(c, (1, N, 3)), np.full((1, N), sigma), t, np.full(1, L))
            assert np.abs(pix[0] - c * (1 - np.exp(-sigma * L))).max() <= 1e-3

        rng = np.random.default_rng(0)
        bg = np.array([0.2, 0.4, 0.9])
        t = np.sort(rng.uniform(0, 2, (20, 32)), axis=1)
        pix, alpha = volume_render(rng.random((20, 32, 3)), np.zeros((20, 32)), t, np.full(20, 2.0))
        assert not alpha.any()
        np.testing.assert_array_equal(pix + (1 - alpha)[:, None] * bg, np.broadcast_to(bg, (20, 3)))

        sig = rng.uniform(0, 5, (200, 64))
        t = np.sort(rng.uniform(0, 3, (200, 64)), axis=1)
        T = transmittance(sig, sample_deltas(t, np.full(200, 3.0)))
        assert np.all(np.diff(T, axis=1) <= 0)


def test_3_interpolation_exactness():
    with criterion(3, "trilinear and MDI: nodes exact, linear fields <= 1e-6 at 100 points"):
        lo, hi = np.array([-1.0, -0.5, 0.0]), np.array([1.0, 1.5, 3.0])
        dims = (17, 13, 21)
        rng = np.random.default_rng(0)
        g = VoxelGrid(rng.normal(size=(*dims, 3)), lo, hi)
        for s in (1, 2, 4):
            # nodes of the stride-s lattice that scale reads
            axes = [np.unique(np.r_[np.arange(0, n - s, s), n - 1]) for n in dims]
            idx = np.stack([rng.choice(ax, 100) for ax in axes], axis=1)
            f = mdi_sample(g, g.node_position(idx), (s,))
            np.testing.assert_allclose(f, g.data[idx[:, 0], idx[:, 1], idx[:, 2]], rtol=0, atol=1e-12)
        idx = np.stack([rng.integers(0, n, 100) for n in dims], axis=1)
        np.testing.assert_allclose(trilinear_sample(g, g.node_position(idx)),
                                   g.data[idx[:, 0], idx[:, 1], idx[:, 2]], rtol=0, atol=1e-12)

        lin = VoxelGrid.zeros(dims, 1, lo, hi)
        nodes = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), -1).reshape(-1, 3)
        coeffs = np.array([2.0, 3.0, -1.0])
        lin.data[..., 0] = (lin.node_position(nodes) @ coeffs + 0.5).reshape(dims)
        pts = lo + (hi - lo) * (0.01 + 0.98 * rng.random((100, 3)))
        truth = pts @ coeffs + 0.5
        rel = lambda f: np.abs(f[:, 0] - truth) / np.maximum(np.abs(truth), 1e-12)
        assert rel(trilinear_sample(lin, pts)).max() <= 1e-6
        for s in (1, 2, 4):
            assert rel(mdi_sample(lin, pts, (s,))).max() <= 1e-6


def test_4_deformation_identity_and_inverse_skinning():
    with criterion(4, "rest pose deform identity to 1e-8, elbow inverse skinning to 1e-6"):
        lo, hi = np.array([-1.0, -1.0, -1.0]), np.array([3.0, 2.0, 1.0])
        rng = np.random.default_rng(1)
        vol = rng.uniform(1.0, 2.0, (8, 8, 8, 4))
        vol[..., -1] = 0.0
        x = rng.uniform(-0.5, 0.5, (100, 3))
        ident = BoneTransforms(np.broadcast_to(np.eye(3), (3, 3, 3)).copy(), np.zeros((3, 3)))
        for space in ("canonical", "observation"):
            assert np.abs(deform(x, ident, vol, lo, hi, space) - x).max() <= 1e-8

        sk = Skeleton([-1, 0], [[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [2, 0, 0]])
        pose = Pose([[0, 0, 0], [0, 0, np.pi / 2]])
        res = 81
        axes = [np.linspace(lo[a], hi[a], res) for a in range(3)]
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        d = segment_distances(nodes, sk.rest_joints, sk.rest_tails)
        oracle = np.concatenate([(d <= 0.25).astype(float), np.zeros((len(nodes), 1))], 1)
        oracle = oracle.reshape(res, res, res, 3)
        r = 0.1
        S, A = np.meshgrid(np.linspace(0.45, 0.95, 6), np.linspace(0, 2 * np.pi, 8, endpoint=False))
        surface = np.stack([1 + r * np.cos(A), S, r * np.sin(A)], -1).reshape(-1, 3)
        xc = deform(surface, obs_to_canonical_transforms(sk, pose), oracle, lo, hi)
        expect = np.stack([1 + S, -r * np.cos(A), r * np.sin(A)], -1).reshape(-1, 3)
        assert np.abs(xc - expect).max() <= 1e-6
        dist = segment_distances(xc, sk.rest_joints[1:], sk.rest_tails[1:])[:, 0]
        assert np.abs(dist - r).max() <= 1e-6


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    res = run_benchmark(BenchmarkConfig())
    out = tmp_path_factory.mktemp("benchmark") / "benchmark.json"
    out.write_text(json.dumps(res.to_dict(), indent=1))
    print(json.dumps(res.to_dict(), indent=1))
    return res


def test_5_generalization_speedup(benchmark):
    res = benchmark
    with criterion(5, "fine-tuning reaches scratch-2000 PSNR in <= 1000 steps, ahead at every step <= 500") as d:
        steps = res.steps_to_target()
        d["info"] = (f"(P0 {res.target_psnr:.2f} dB, reached at {steps}, "
                     f"{res.seconds['total'] / 60:.1f} min)")
        assert steps is not None and steps <= 1000
        for it in BenchmarkConfig().early_checkpoints:
            assert res.finetune_psnr[it] > res.scratch_psnr[it], it
        assert res.seconds["total"] <= 3600
        assert abs(res.target_psnr - PINNED_SCRATCH_PSNR) <= PSNR_BAND
        assert steps <= PINNED_STEPS_TO_TARGET + 200


def test_5b_pretrained_start_is_better(benchmark):
    with criterion(5, "fine-tuning starts from a lower photometric error than scratch") as d:
        d["info"] = f"({benchmark.start_loss['finetune']:.4f} vs {benchmark.start_loss['scratch']:.4f})"
        assert benchmark.start_loss["finetune"] <= benchmark.start_loss["scratch"]


def test_6_ablation_ordering(benchmark):
    ab = benchmark.ablation_psnr
    with criterion(6, "500-step PSNR: all > no general voxels > no radiance") as d:
        d["info"] = f"({ab['all']:.2f} / {ab['no_general_voxels']:.2f} / {ab['no_radiance']:.2f} dB)"
        assert ab["all"] > ab["no_general_voxels"] > ab["no_radiance"]


def test_7_persistence(tiny_data, tmp_path):
    with criterion(7, "bitwise checkpoint round trip, exact resume in deterministic mode"):
        model = tiny_model([d.skeleton for d in tiny_data])
        cfg = TrainConfig(iterations=6, render=TINY_RENDER, seed=3)
        with threadpool_limits(1):
            full = pretrain(tiny_data[:2], cfg, model)
            part = pretrain(tiny_data[:2], cfg, model, run=False)
            part.run(3, log_every=0)
            path = save_run(part, tmp_path / "mid.gnvx")
            ck = load_checkpoint(path)
            for k, v in part.shared.store.items():
                assert ck.shared.store[k].dtype == v.dtype and ck.shared.store[k].tobytes() == v.tobytes()
            for a, b in zip(part.subjects, ck.subjects):
                for k, v in a.store.items():
                    assert b.store[k].tobytes() == v.tobytes()
            assert save_run(part, tmp_path / "again.gnvx").read_bytes() == path.read_bytes()
            resumed = resume_run(path, tiny_data[:2])
            resumed.run(3, log_every=0)
        assert [r.loss for r in resumed.history] == [r.loss for r in full.history[3:]]
        for k, v in full.shared.store.items():
            assert resumed.shared.store[k].tobytes() == v.tobytes()

        # the same through the command line
        cwd = os.getcwd()
        os.chdir(tmp_path)
        try:
            conf = toy_config().to_dict()
            conf["data"].update(subjects=2, frames=2, cameras=2, image_size=24)
            conf["train"]["iterations"] = 6
            conf["checkpoint_every"] = 3
            open("c.json", "w").write(json.dumps(conf))
            assert main(["gen-data", "--config", "c.json", "--out", "data"]) == 0
            assert main(["scratch", "--config", "c.json", "--out", "a", "--deterministic"]) == 0
            assert main(["scratch", "--config", "c.json", "--out", "b", "--deterministic",
                         "--resume", "a/checkpoint_000003.gnvx"]) == 0
            col = lambda p: [row["loss"] for row in csv.DictReader(open(p))]
            assert col("b/train_log.csv") == col("a/train_log.csv")[3:]
        finally:
            os.chdir(cwd)


def test_8_metrics():
    with criterion(8, "PSNR of mse 0.01 is 20 dB, SSIM of identical images is 1, to 1e-9"):
        a = np.full((8, 8, 3), 0.5)
        assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-9
        img = np.random.default_rng(0).random((32, 32, 3))
        assert abs(ssim(img, img) - 1.0) <= 1e-9
