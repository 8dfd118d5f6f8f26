import numpy as np
import pytest

from genvox.errors import ConfigError
from genvox.losses import LossWeights, PerceptualNet, mse_loss, perceptual_loss, psnr, ssim, total_loss


def test_mse_cases():
    rng = np.random.default_rng(0)
    a = rng.random((4, 5, 3))
    assert mse_loss(a, a) == 0
    assert mse_loss(a + 0.1, a) == pytest.approx(0.01, abs=1e-12)
    b = rng.random((4, 5, 3))
    assert mse_loss(a, b) == mse_loss(b, a)


def test_total_loss_schedule():
    w = LossWeights()
    assert total_loss(w, 0, "finetune", 0.5, 0.2) == pytest.approx(5.0, abs=1e-12)
    assert total_loss(w, 300, "finetune", 0.5, 0.2) == pytest.approx(0.3, abs=1e-12)
    assert total_loss(w, 0, "pretrain", 0.0, 0.0) == 0
    # the switch happens exactly at the configured iteration
    assert w.coefficients("finetune", 299) == (10.0, 0.0)
    assert w.coefficients("finetune", 300) == (0.2, 1.0)
    assert w.coefficients("pretrain", 0) == w.coefficients("scratch", 0) == (0.2, 1.0)
    with pytest.raises(ConfigError):
        w.coefficients("warmup", 0)


def test_total_loss_is_linear_in_inputs():
    w = LossWeights()
    for it in (0, 500):
        base = total_loss(w, it, "finetune", 0.3, 0.4)
        assert total_loss(w, it, "finetune", 0.6, 0.8) == pytest.approx(2 * base, abs=1e-14)


def test_psnr_cases():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 1.0) == pytest.approx(0.0, abs=1e-9)


def test_psnr_falls_with_noise():
    rng = np.random.default_rng(1)
    img = rng.random((32, 32, 3))
    noise = rng.normal(size=img.shape)
    vals = [psnr(img, img + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).random((24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_negative_checkerboard():
    yy, xx = np.mgrid[0:24, 0:24]
    board = 0.5 + 0.4 * (((yy // 3) + (xx // 3)) % 2 * 2 - 1)
    assert ssim(board, 1.0 - board) < 0


def test_ssim_constants_luminance_only():
    a, b = np.full((16, 16), 0.3), np.full((16, 16), 0.7)
    c1 = 0.01 ** 2
    expect = (2 * 0.3 * 0.7 + c1) / (0.3 ** 2 + 0.7 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-9)


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_perceptual_properties(tmp_path):
    net = PerceptualNet.random(0)
    rng = np.random.default_rng(4)
    x = rng.random((2, 16, 16, 3))
    y = rng.random((2, 16, 16, 3))
    assert perceptual_loss(x, x, net) == 0
    assert perceptual_loss(x, y, net) >= 0
    # shuffling pixels keeps the mse against a constant image but changes the perceptual distance
    flat = x.reshape(-1, 3).copy()
    shuffled = flat[rng.permutation(len(flat))].reshape(x.shape)
    gray = np.full_like(x, 0.5)
    assert mse_loss(x, gray) == pytest.approx(mse_loss(shuffled, gray), abs=1e-12)
    assert perceptual_loss(x, gray, net) != pytest.approx(perceptual_loss(shuffled, gray, net), abs=1e-6)
    path = tmp_path / "net.gnvp"
    net.save(path)
    loaded = PerceptualNet.load(path)
    assert perceptual_loss(x, y, loaded) == pytest.approx(perceptual_loss(x, y, net), rel=1e-6)
