import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpkd.nn import layers as L


def naive_conv(x, w, b, stride):
    m, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    y = np.zeros((m, c_out, ho, wo))
    for n in range(m):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = x[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    y[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return y


def naive_pool(x, size, stride):
    m, c, h, wd = x.shape
    ho, wo = (h - size) // stride + 1, (wd - size) // stride + 1
    y = np.zeros((m, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            y[:, :, i, j] = x[:, :, i * stride:i * stride + size,
                              j * stride:j * stride + size].max(axis=(2, 3))
    return y


def test_spec_validation():
    with pytest.raises(ValueError):
        L.LayerSpec("softmax")
    with pytest.raises(ValueError):
        L.LayerSpec("dense", (3,))
    with pytest.raises(ValueError):
        L.dense(0, 3)
    assert str(L.dense(3, 4)) == "dense(3, 4)"
    assert L.maxpool2d(3).dims == (3, 3)


def test_param_shapes_and_counts():
    assert L.param_shapes(L.dense(3, 4)) == [(3, 4), (4,)]
    assert L.param_shapes(L.conv2d(2, 5, 3)) == [(5, 2, 3, 3), (5,)]
    assert L.param_count(L.conv2d(2, 5, 3)) == 5 * 2 * 9 + 5
    for spec in (L.relu(), L.flatten(), L.maxout(2), L.maxpool2d(2)):
        assert L.param_count(spec) == 0


def test_output_shapes():
    assert L.output_shape(L.conv2d(1, 4, 5), (1, 28, 28)) == (4, 24, 24)
    assert L.output_shape(L.conv2d(1, 4, 3, 2), (1, 7, 7)) == (4, 3, 3)
    assert L.output_shape(L.maxpool2d(2), (4, 24, 24)) == (4, 12, 12)
    assert L.output_shape(L.maxpool2d(3, 2), (4, 9, 9)) == (4, 4, 4)
    assert L.output_shape(L.maxout(2), (6, 3, 3)) == (3, 3, 3)
    assert L.output_shape(L.flatten(), (2, 3, 4)) == (24,)
    with pytest.raises(L.ShapeError):
        L.output_shape(L.dense(5, 2), (4,))
    with pytest.raises(L.ShapeError):
        L.output_shape(L.conv2d(2, 4, 3), (1, 8, 8))
    with pytest.raises(L.ShapeError):
        L.output_shape(L.conv2d(1, 4, 9), (1, 8, 8))
    with pytest.raises(L.ShapeError):
        L.output_shape(L.maxout(4), (6,))


def test_relu_and_maxout_examples():
    y, _ = L.forward(L.relu(), [], np.array([[-1.0, 2.0]]))
    assert y.tolist() == [[0.0, 2.0]]
    y, _ = L.forward(L.maxout(2), [], np.array([[3.0, -1.0]]))
    assert y.tolist() == [[3.0]]


def test_single_piece_maxout_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 4, 2, 2))
    y, cache = L.forward(L.maxout(1), [], x)
    assert np.array_equal(y, x)
    gx, _ = L.backward(L.maxout(1), [], cache, x)
    assert np.array_equal(gx, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 2),
       st.integers(0, 10_000))
def test_conv_matches_naive(c_in, c_out, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c_in, 7, 6))
    w = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    y, _ = L.forward(L.conv2d(c_in, c_out, k, stride), [w, b], x)
    np.testing.assert_allclose(y, naive_conv(x, w, b, stride), rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_pool_matches_naive(size, stride, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 9, 8))
    y, _ = L.forward(L.maxpool2d(size, stride), [], x)
    assert np.array_equal(y, naive_pool(x, size, stride))


@pytest.mark.parametrize("spec", [L.maxpool2d(2), L.maxpool2d(3, 2), L.maxpool2d(2, 1)])
def test_pool_ties_route_gradient_to_one_input(spec):
    x = np.zeros((1, 1, 6, 6))
    y, cache = L.forward(spec, [], x)
    gx, _ = L.backward(spec, [], cache, np.ones_like(y))
    # every window sends its unit gradient to exactly one input
    assert gx.sum() == y.size


def _input_grad_check(spec, params, x, rng):
    y, cache = L.forward(spec, params, x)
    gy = rng.standard_normal(y.shape)
    gx, _ = L.backward(spec, params, cache, gy)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = ((L.forward(spec, params, xp)[0] - L.forward(spec, params, xm)[0])
                    * gy).sum() / (2 * h)
    return np.abs(gx - num).max() / max(np.abs(num).max(), 1e-12)


@pytest.mark.parametrize("spec,shape", [
    (L.dense(4, 3), (2, 4)),
    (L.conv2d(2, 3, 3), (2, 2, 5, 5)),
    (L.conv2d(2, 2, 2, 2), (2, 2, 5, 5)),
    (L.maxpool2d(2), (2, 2, 6, 6)),
    (L.maxpool2d(3, 2), (2, 2, 7, 7)),
    (L.relu(), (3, 5)),
    (L.maxout(3), (2, 6, 2, 2)),
    (L.flatten(), (2, 2, 3, 3)),
])
def test_input_gradients_float64(spec, shape):
    rng = np.random.default_rng(1)
    params = [rng.standard_normal(s) for s in L.param_shapes(spec)]
    x = rng.standard_normal(shape)
    assert _input_grad_check(spec, params, x, rng) < 1e-6


def test_skipping_input_gradient():
    rng = np.random.default_rng(2)
    spec = L.conv2d(1, 2, 3)
    params = [rng.standard_normal(s) for s in L.param_shapes(spec)]
    y, cache = L.forward(spec, params, rng.standard_normal((2, 1, 5, 5)))
    gx, pg = L.backward(spec, params, cache, np.ones_like(y), need_input_grad=False)
    gx2, pg2 = L.backward(spec, params, cache, np.ones_like(y))
    assert gx is None and gx2 is not None
    for a, b in zip(pg, pg2):
        assert np.array_equal(a, b)
