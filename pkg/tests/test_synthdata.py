import numpy as np
import pytest

from genvox.dataset import load_collection, load_subject
from genvox.errors import ConfigError
from genvox.renderer import Camera, RenderConfig
from genvox.skeleton import Pose, forward_kinematics
from genvox.synthdata import (BASE_RADII, camera_rig, foreground_fraction, generate_dataset, gt_field,
                              make_subjects, render_gt)


@pytest.fixture(scope="module")
def subject():
    return make_subjects(1, 7)[0]


def test_field_on_axis_surface_and_falloff(subject):
    pose = Pose.rest(8)
    sk = subject.skeleton
    mid = 0.5 * (sk.rest_joints[3] + sk.rest_tails[3])  # left forearm
    c, s = gt_field(subject, pose, mid)
    assert s[0] == subject.sigma_max
    np.testing.assert_array_equal(c[0], subject.colors[3])
    # straight out along -z from the forearm, away from all other bones
    r = subject.radii[3]
    _, s = gt_field(subject, pose, mid + np.array([0, 0, -r]))
    assert s[0] == pytest.approx(subject.sigma_max / 2, abs=1e-9)
    _, s = gt_field(subject, pose, mid + np.array([0, 0, -(r + subject.softness)]))
    assert s[0] == 0


def test_field_is_rigid_with_bone(subject):
    rng = np.random.default_rng(0)
    sk = subject.skeleton
    pose = Pose(rng.normal(scale=0.4, size=(8, 3)), rng.normal(scale=0.1, size=3))
    A = forward_kinematics(sk, pose.root_translation, pose.omega)
    # points on the left forearm's rest segment, slightly off axis
    u = rng.uniform(0.2, 0.8, 10)
    rest = sk.rest_joints[3] + u[:, None] * (sk.rest_tails[3] - sk.rest_joints[3]) + [0, 0.01, 0]
    posed = rest @ A[3, :3, :3].T + A[3, :3, 3]
    c0, s0 = gt_field(subject, Pose.rest(8), rest)
    c1, s1 = gt_field(subject, pose, posed)
    np.testing.assert_allclose(s1, s0, atol=1e-8)
    np.testing.assert_array_equal(c1, c0)


def test_make_subjects_deterministic_and_bounded():
    a, b = make_subjects(4, 3), make_subjects(4, 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.colors, y.colors)
        np.testing.assert_array_equal(x.radii, y.radii)
    palettes = {x.colors.tobytes() for x in a}
    assert len(palettes) == 4
    for s in make_subjects(20, 1):
        assert np.all(np.abs(s.limb_scales - 1) <= 0.2)
        ratio = s.radii / np.asarray(BASE_RADII)
        assert np.all((ratio >= 0.7) & (ratio <= 1.3))
        assert np.all((s.colors >= 0) & (s.colors <= 1))
    with pytest.raises(ConfigError):
        make_subjects(0)


def test_render_deterministic_and_empty_view(subject):
    cam = camera_rig(4, 24)[1]
    a = render_gt(subject, Pose.rest(8), cam)
    b = render_gt(subject, Pose.rest(8), cam)
    np.testing.assert_array_equal(a, b)
    away = Camera.look_at((0, 0, 5.0), (0, 0, 10.0), (0, 1, 0), 16, 16, 30.0)
    np.testing.assert_array_equal(render_gt(subject, Pose.rest(8), away), np.zeros((16, 16, 3)))
    with pytest.raises(ConfigError):
        render_gt(subject, Pose.rest(8), cam, RenderConfig(n_samples=64, stratified=False))


def test_integrator_converged_at_256(subject):
    cam = camera_rig(4, 32)[0]
    pose = Pose.rest(8)
    lo = render_gt(subject, pose, cam, RenderConfig(n_samples=256, stratified=False))
    hi = render_gt(subject, pose, cam, RenderConfig(n_samples=512, stratified=False))
    mse = np.mean((lo - hi) ** 2)
    assert 10 * np.log10(1 / mse) >= 45


def test_dataset_layout_and_round_trip(tmp_path):
    subs = make_subjects(2, 5)
    data = generate_dataset(subs, 4, 3, out_dir=tmp_path, image_size=20)
    ds = data[0]
    assert len(ds.train) == 4 and len(ds.eval) == 8
    assert all(c == 0 for _, c in ds.train) and all(c != 0 for _, c in ds.eval)
    assert [f.timestamp for f in ds.frames] == [i / 3 for i in range(4)]
    back = load_collection(tmp_path)
    assert [b.subject_id for b in back] == ["0", "1"]
    for f0, f1 in zip(ds.frames, back[0].frames):
        np.testing.assert_array_equal(f0.pose.omega, f1.pose.omega)
        np.testing.assert_array_equal(f0.pose.root_translation, f1.pose.root_translation)
    np.testing.assert_array_equal(back[0].skeleton.rest_joints, ds.skeleton.rest_joints)
    np.testing.assert_array_equal(back[0].image(2, 1), ds.image(2, 1))
    assert back[0].cameras[1].to_dict() == ds.cameras[1].to_dict()


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        generate_dataset(make_subjects(1), 1, 1, out_dir=blocker / "sub", image_size=8)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_subject(tmp_path)


def test_training_views_have_foreground(tiny_data):
    for ds in tiny_data:
        for f, c in ds.train:
            assert foreground_fraction(ds.image(f, c), ds.background) >= 0.05
