import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from genvox.errors import ConfigError
from genvox.estimator import AvatarEstimator, check_datasets, check_views

TINY = dict(voxel_dims=(16, 16, 16), voxel_channels=4, embed_dim=8, weight_expand=16, weight_channels=(4,),
            pose_hidden=(16,), radiance_width=32, radiance_depth=2, iterations=3, n_samples=16, patch_count=2,
            patch_size=8, eval_samples=12)


@pytest.fixture(scope="module")
def fitted(tiny_data):
    return AvatarEstimator(**TINY).fit(tiny_data[:2])


def test_params_and_clone():
    est = AvatarEstimator(**TINY, seed=4)
    params = est.get_params()
    assert params["seed"] == 4 and params["iterations"] == 3
    c = clone(est)
    assert c.get_params() == params and not hasattr(c, "shared_")
    assert est.set_params(iterations=7).iterations == 7


def test_unfitted_raises(tiny_data):
    with pytest.raises(NotFittedError):
        AvatarEstimator().predict([(0, 0)])


def test_validation_helpers(tiny_data):
    assert check_datasets(tiny_data[0]) == [tiny_data[0]]
    with pytest.raises(ConfigError):
        check_datasets([])
    with pytest.raises(ConfigError):
        check_datasets(["x"])
    assert check_views([(0, 1), np.array([2, 0])], tiny_data[0]) == [(0, 1), (2, 0)]
    with pytest.raises(ConfigError):
        check_views([(9, 0)], tiny_data[0])
    with pytest.raises(ConfigError):
        check_views([0], tiny_data[0])


def test_pretrain_fit_and_predict(fitted, tiny_data):
    assert fitted.n_iter_ == 3 and len(fitted.loss_curve_) == 3 and len(fitted.subjects_) == 2
    pred = fitted.predict([(0, 0), (1, 1)], subject=0)
    assert pred.shape == (2, 24, 24, 3)
    np.testing.assert_array_equal(pred, fitted.predict([(0, 0), (1, 1)], subject=0))
    s = fitted.score(subject=1)
    assert np.isfinite(s) and s > 0


def test_finetune_from_state_and_file(fitted, tiny_data, tmp_path):
    ft = AvatarEstimator(**TINY, pretrained=fitted.shared_).fit([tiny_data[2]])
    assert ft.run_.config.phase == "finetune"
    path = fitted.save(tmp_path / "p.gnvx")
    ft2 = AvatarEstimator(**TINY, pretrained=str(path)).fit([tiny_data[2]])
    assert ft.loss_curve_ == ft2.loss_curve_


def test_scratch_when_no_pretrained(tiny_data):
    est = AvatarEstimator(**TINY).fit([tiny_data[2]])
    assert est.run_.config.phase == "scratch"
