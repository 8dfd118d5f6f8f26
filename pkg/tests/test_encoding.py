import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from genvox.encoding import encoded_dim, positional_encode, positional_encode_vjp


def test_zero_two_freqs():
    np.testing.assert_array_equal(positional_encode(np.array([0.0]), 2), [0.0, 1.0, 0.0, 1.0])


def test_quarter_turn_one_freq():
    np.testing.assert_allclose(positional_encode(np.array([np.pi / 2]), 1), [1.0, 0.0], atol=1e-15)


def test_coordinate_dimension():
    assert positional_encode(np.zeros(3), 10).shape == (60,)
    assert encoded_dim(3, 10) == 60


def test_frequencies_are_powers_of_two():
    x = np.array([0.3])
    out = positional_encode(x, 4)
    expect = np.ravel([[np.sin(2.0 ** k * 0.3), np.cos(2.0 ** k * 0.3)] for k in range(4)])
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3)), elements=st.floats(-20, 20)),
       st.integers(0, 6))
def test_shape_and_range(x, L):
    out = positional_encode(x, L)
    assert out.shape == (x.shape[0], 2 * L * x.shape[1])
    assert np.all(np.abs(out) <= 1.0)


def test_gradient_matches_analytic_derivative():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 3)
    L = 5
    _, pb = positional_encode_vjp(x, L)
    for d in range(3):
        for j in range(L):
            for k, deriv in ((0, 2.0 ** j * np.cos(2.0 ** j * x[d])), (1, -(2.0 ** j) * np.sin(2.0 ** j * x[d]))):
                g = np.zeros(2 * L * 3)
                g[d * 2 * L + 2 * j + k] = 1.0
                gx = pb(g)
                assert gx[d] == pytest.approx(deriv, abs=1e-10)
                assert np.count_nonzero(gx) <= 1
