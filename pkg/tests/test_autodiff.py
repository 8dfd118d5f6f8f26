import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genvox.autodiff import (AdamState, LearningRates, ParameterStore, adam_step, check_gradients,
                             lr_schedule)
from genvox.errors import MissingGradientError
from genvox.layers import linear_vjp, softplus, sigmoid


def _store(value):
    s = ParameterStore({"w": np.array(value, dtype=np.float64)})
    return s


def test_adam_first_step_moves_by_lr():
    s = _store([0.0])
    s.grads["w"] = np.array([1.0])
    adam_step(s, AdamState(), 0.01)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert s["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_grad_leaves_param():
    s = _store([0.3, -0.2])
    s.grads["w"] = np.zeros(2)
    st_ = AdamState()
    adam_step(s, st_, 0.01)
    np.testing.assert_array_equal(s["w"], [0.3, -0.2])
    assert st_.step == 1


def test_adam_deterministic_and_sign_flip():
    g = np.random.default_rng(0).normal(size=5)
    a, b, c = _store(np.zeros(5)), _store(np.zeros(5)), _store(np.zeros(5))
    sa, sb, sc = AdamState(), AdamState(), AdamState()
    for _ in range(3):
        a.grads["w"], b.grads["w"], c.grads["w"] = g.copy(), g.copy(), -g
        adam_step(a, sa, 0.01)
        adam_step(b, sb, 0.01)
        adam_step(c, sc, 0.01)
    np.testing.assert_array_equal(a["w"], b["w"])
    np.testing.assert_array_equal(a["w"], -c["w"])


def test_adam_missing_gradient_names_parameter():
    s = ParameterStore({"radiance.x": np.zeros(2)})
    del s.grads["radiance.x"]
    with pytest.raises(MissingGradientError, match="radiance.x"):
        adam_step(s, AdamState(), 0.1)


def test_adam_moments_nonnegative():
    s = _store(np.zeros(4))
    st_ = AdamState()
    rng = np.random.default_rng(3)
    for _ in range(5):
        s.grads["w"] = rng.normal(size=4)
        adam_step(s, st_, 1e-3)
    assert st_.step == 5
    assert np.all(st_.v["w"] >= 0)
    assert st_.m["w"].shape == s["w"].shape


def test_lr_schedule_values():
    assert lr_schedule(5e-5, 0) == 5e-5
    assert lr_schedule(2e-2, 499_999) == 2e-2
    assert lr_schedule(5e-4, 500_000) == pytest.approx(5e-5, rel=1e-12)


def test_group_rates_by_name():
    r = LearningRates()
    assert r.base_for("general_voxels") == 2e-2
    assert r.base_for("individual_voxels") == 2e-2
    assert r.base_for("radiance.trunk.0.weight") == 5e-4
    assert r.base_for("pose_refine.0.weight") == 5e-5
    assert r.base_for("embedding") == 5e-5


def test_store_accumulate_is_additive():
    s = ParameterStore({"a": np.zeros(3)})
    s.zero_grads()
    s.accumulate({"a": np.ones(3)})
    s.accumulate({"a": np.ones(3)})
    np.testing.assert_array_equal(s.grads["a"], 2 * np.ones(3))
    s.zero_grads()
    np.testing.assert_array_equal(s.grads["a"], np.zeros(3))


def test_linear_vjp_definition():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(1, 3))
    y, pb = linear_vjp(W, b, x)
    np.testing.assert_allclose(y, x @ W.T + b)
    g = rng.normal(size=(1, 4))
    gx, gW, gb = pb(g)
    np.testing.assert_allclose(gx, g @ W)
    np.testing.assert_allclose(gW, g.T @ x)
    zx, zW, zb = pb(np.zeros_like(g))
    assert not zx.any() and not zW.any() and not zb.any()


def test_softplus_gradient_at_zero_is_half():
    # d/dx log(1 + e^x) = sigmoid(x)
    assert sigmoid(np.array(0.0)) == 0.5
    assert softplus(np.array(0.0)) == pytest.approx(np.log(2.0), abs=1e-15)


def _linear_block(W0, b0):
    def apply(params, inputs):
        y, pb = linear_vjp(params["W"], params["b"], inputs["x"])

        def pull(g):
            gx, gW, gb = pb(g)
            return {"x": gx}, {"W": gW, "b": gb}

        return y, pull

    return apply, {"W": W0, "b": b0}


def test_check_gradients_random_five_parameter_block():
    rng = np.random.default_rng(5)
    apply, params = _linear_block(rng.normal(size=(1, 4)), rng.normal(size=1))
    rep = check_gradients("lin5", apply, params, {"x": rng.normal(size=(3, 4))}, seed=0, wrt_inputs=("x",))
    assert rep.passed and rep.max_rel_err <= 1e-4


def test_check_gradients_constant_block():
    def apply(params, inputs):
        return np.ones(3), lambda g: ({}, {"w": np.zeros_like(params["w"])})

    rep = check_gradients("const", apply, {"w": np.array([1.0, 2.0])}, {}, seed=0)
    assert rep.passed and rep.max_rel_err == 0.0


def test_check_gradients_catches_wrong_pullback():
    rng = np.random.default_rng(2)

    def apply(params, inputs):
        W = params["W"]
        y = inputs["x"] @ W.T
        return y, lambda g: ({}, {"W": 1.5 * g.T @ inputs["x"]})

    rep = check_gradients("bad", apply, {"W": rng.normal(size=(2, 3))}, {"x": rng.normal(size=(4, 3))}, seed=0)
    assert not rep.passed
    assert "W" in rep.worst


def test_check_gradients_nonfinite_forward_names_block():
    def apply(params, inputs):
        return params["w"] / 0.0, lambda g: ({}, {"w": g})

    with np.errstate(divide="ignore"), pytest.raises(Exception, match="blowup"):
        check_gradients("blowup", apply, {"w": np.array([1.0])}, {}, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 10))
def test_adam_step_bounded_by_lr(g, lr):
    s = _store([0.0])
    s.grads["w"] = np.array([g])
    adam_step(s, AdamState(), lr)
    assert abs(s["w"][0]) <= lr * (1 + 1e-9)
