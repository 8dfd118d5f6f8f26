import numpy as np
import pytest

from conftest import tiny_model
from genvox.cli import zero_other
from genvox.errors import ConfigError
from genvox.model import FrameInput, ModelConfig, RenderPass, SharedState, SubjectState, posed_bounds, render_image
from genvox.renderer import RenderConfig, generate_rays, image_pixels, pixel_centers, ray_aabb
from genvox.skeleton import Pose
from genvox.synthdata import camera_rig, make_subjects, render_gt


@pytest.fixture(scope="module")
def subject():
    return make_subjects(1, 0)[0]


def states(subject, seed=0, **kw):
    m = tiny_model([subject.skeleton], **kw)
    return SharedState.create(m, seed), SubjectState.create(m, subject.skeleton)


def randomize(shared, subj, seed):
    rng = np.random.default_rng(seed)
    for store in (shared.store, subj.store):
        for name, v in store.items():
            if name.endswith("voxels") or name == "embedding":
                v[...] = rng.normal(scale=0.5, size=v.shape)


def test_states_start_zero_and_match(subject):
    sh, su = states(subject)
    assert not sh.store["general_voxels"].any()
    assert not su.store["individual_voxels"].any() and not su.store["embedding"].any()
    assert su.store["individual_voxels"].shape == sh.store["general_voxels"].shape
    with pytest.raises(ConfigError):
        SubjectState.create(sh.config.replace(K=5), subject.skeleton)


def test_zero_init_render_is_near_background(subject):
    sh, su = states(subject, cull_radius=None)
    img = render_image(sh, su, Pose.rest(8), camera_rig(4, 24)[1], 0.0, RenderConfig(n_samples=128))
    assert np.abs(img).mean() < 0.05


def test_deterministic_render(subject):
    sh, su = states(subject)
    randomize(sh, su, 1)
    cam = camera_rig(4, 20)[2]
    pose = Pose(np.random.default_rng(0).normal(scale=0.3, size=(8, 3)))
    a = render_image(sh, su, pose, cam, 0.5, RenderConfig(n_samples=32))
    b = render_image(sh, su, pose, cam, 0.5, RenderConfig(n_samples=32))
    np.testing.assert_array_equal(a, b)


def test_large_cull_radius_matches_no_culling(subject):
    cam = camera_rig(4, 20)[0]
    imgs = []
    for cr in (None, 100.0):
        sh, su = states(subject, cull_radius=cr)
        randomize(sh, su, 2)
        imgs.append(render_image(sh, su, Pose.rest(8), cam, 0.1, RenderConfig(n_samples=32)))
    np.testing.assert_array_equal(imgs[0], imgs[1])


def test_culling_only_skips_far_samples(subject):
    sh, su = states(subject, cull_radius=0.25)
    cam = camera_rig(4, 20)[1]
    frame = FrameInput(Pose.rest(8), 0.0, cam)
    pix = image_pixels(20, 20).reshape(-1, 2)
    rp = RenderPass(sh, su, frame, pix, RenderConfig(n_samples=32, stratified=False), None)
    full = RenderPass(*states(subject, cull_radius=None), frame, pix, RenderConfig(n_samples=32, stratified=False),
                      None)
    assert 0 < rp.n_points < full.n_points


def test_orbit_has_no_holes(subject):
    """Every pixel the true body covers is inside the sampled interval."""
    pose = Pose(np.random.default_rng(3).normal(scale=0.3, size=(8, 3)))
    lo, hi = posed_bounds(subject.skeleton, pose, ModelConfig().body_pad)
    for cam in camera_rig(8, 24, elevation_deg=25.0):
        gt = render_gt(subject, pose, cam)
        pix = image_pixels(24, 24).reshape(-1, 2)
        o, d = generate_rays(cam, pixel_centers(pix[:, 0], pix[:, 1]))
        _, _, hit = ray_aabb(o, d, lo, hi)
        covered = np.abs(gt.reshape(-1, 3)).sum(axis=1) > 1e-6
        assert np.all(hit[covered])


def test_individual_voxels_zero_contribute_nothing(subject):
    sh, su = states(subject)
    randomize(sh, su, 4)
    su.store.params["individual_voxels"][...] = 0
    cam = camera_rig(4, 20)[3]
    a = render_image(sh, su, Pose.rest(8), cam, 0.0, RenderConfig(n_samples=32))
    sh2, su2 = zero_other(sh, su, "general")
    b = render_image(sh2, su2, Pose.rest(8), cam, 0.0, RenderConfig(n_samples=32))
    np.testing.assert_array_equal(a, b)
    # zeroing the other grid never mutates the originals
    assert sh.store["general_voxels"].any()


def test_backward_covers_every_parameter(subject):
    sh, su = states(subject)
    randomize(sh, su, 5)
    cam = camera_rig(4, 20)[0]
    rp = RenderPass(sh, su, FrameInput(Pose.rest(8), 0.2, cam), image_pixels(20, 20).reshape(-1, 2)[150:250],
                    RenderConfig(n_samples=16), np.random.default_rng(0))
    grads = rp.backward(np.ones((100, 3), dtype=np.float32))
    assert set(grads) == set(sh.store.params) | set(su.store.params)
    for k, g in grads.items():
        assert g.dtype == np.float32, k
