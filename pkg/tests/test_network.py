import numpy as np
import pytest

from lpkd.losses import DistillConfig, affinity, lp_grad, lp_loss
from lpkd.nn import (CheckpointError, GradCheckError, OptimizerState, ShapeError,
                     backward, conv2d, dense, flatten, forward, grad_check, init_network,
                     load_checkpoint, maxout, maxpool2d, optimizer_step, predict, relu,
                     save_checkpoint)
from lpkd.nn.checkpoint import from_bytes, to_bytes
from lpkd.nn.gradcheck import numerical_grad, relative_error
from lpkd.nn.network import features


def small_cnn(seed=0, dtype=np.float32):
    specs = [conv2d(1, 4, 3), relu(), maxpool2d(2), flatten(), dense(4 * 3 * 3, 6),
             maxout(2), dense(3, 3)]
    return init_network(specs, (1, 8, 8), seed, tap_index=3, dtype=dtype)


def test_uniform_init_range_and_degenerate_interval():
    specs = [dense(10, 8), relu(), dense(8, 3)]
    net = init_network(specs, (10,), 7, scheme="uniform")
    for a in net.parameters():
        assert a.min() >= -0.005 and a.max() <= 0.005
    zero = init_network(specs, (10,), 7, scheme="uniform", low=0.0, high=0.0)
    assert all(not a.any() for a in zero.parameters())


def test_init_is_deterministic():
    a, b = small_cnn(3), small_cnn(3)
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)
    c = small_cnn(4)
    assert not np.array_equal(a.parameters()[0], c.parameters()[0])


def test_scaled_init_zero_bias_and_bound():
    net = init_network([dense(50, 4)], (50,), 0)
    w, b = net.parameters()
    assert not b.any()
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_incompatible_layers_name_both():
    with pytest.raises(ShapeError) as exc:
        init_network([dense(4, 5), dense(6, 2)], (4,), 0)
    msg = str(exc.value)
    assert "layer 1" in msg and "layer 0" in msg


def test_default_tap_is_midpoint_and_param_count():
    specs = [dense(4, 5), relu(), dense(5, 5), relu(), dense(5, 2)]
    net = init_network(specs, (4,), 0)
    assert net.tap_index == 2
    assert net.param_count() == (4 * 5 + 5) + (5 * 5 + 5) + (5 * 2 + 2)
    assert net.param_count() == sum(a.size for a in net.parameters())


def test_identity_dense_forward():
    net = init_network([dense(3, 3)], (3,), 0)
    net.params[0][0][:] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
    assert np.array_equal(forward(net, x).logits, x)


def test_forward_shape_error_names_shapes():
    net = small_cnn()
    with pytest.raises(ShapeError, match=r"\(m, 1, 8, 8\)"):
        forward(net, np.zeros((2, 1, 7, 8)))


def test_forward_is_deterministic():
    net = small_cnn()
    x = np.random.default_rng(0).random((5, 1, 8, 8)).astype(np.float32)
    a, b = forward(net, x), forward(net, x)
    for u, v in zip(a.outputs, b.outputs):
        assert np.array_equal(u, v)


def test_zero_upstream_gives_zero_gradients():
    net = small_cnn()
    x = np.random.default_rng(0).random((4, 1, 8, 8)).astype(np.float32)
    tr = forward(net, x)
    grads = backward(net, tr, np.zeros((4, 3)), np.zeros((4, net.tap_dim)))
    assert all(not g.any() for group in grads for g in group)


def test_backward_rejects_mismatched_trace():
    net = small_cnn()
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    tr = forward(net, x)
    with pytest.raises(ShapeError):
        backward(net, tr, np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        backward(net, forward(net, x, upto=2), np.zeros((2, 3)))
    other = small_cnn()
    other.tap_index = 5
    with pytest.raises(ValueError):
        backward(other, tr, np.zeros((2, 3)))


def test_linear_least_squares_gradient():
    # loss = 1/2 |x W + b - t|^2 summed; dW = x^T r, db = sum r
    net = init_network([dense(2, 2)], (2,), 0, dtype=np.float64)
    w = np.array([[1.0, 2.0], [-1.0, 0.5]])
    b = np.array([0.1, -0.2])
    net.params[0] = [w.copy(), b.copy()]
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    tr = forward(net, x)
    r = tr.logits - t
    gw, gb = backward(net, tr, r)[0]
    # hand evaluation of x^T (xW + b - t)
    r_hand = np.array([[1 - 2 + 0.1 - 0, 2 + 1 - 0.2 - 1], [3 + 1 + 0.1 - 1, 6 - 0.5 - 0.2]])
    np.testing.assert_allclose(r, r_hand)
    np.testing.assert_allclose(gw, x.T @ r_hand)
    np.testing.assert_allclose(gb, r_hand.sum(axis=0))


def _ce(labels):
    def evaluate(trace):
        z = trace.logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        m = len(labels)
        loss = -np.log(p[np.arange(m), labels]).mean()
        g = p.copy()
        g[np.arange(m), labels] -= 1
        return loss, g / m, None
    return evaluate


def test_grad_check_cnn_float32():
    net = small_cnn(1)
    x = np.random.default_rng(5).standard_normal((4, 1, 8, 8)).astype(np.float32)
    report = grad_check(net, x, _ce(np.array([0, 1, 2, 1])))
    assert report.ok, report.failures
    assert len(report.errors) == 6


def test_grad_check_float64_tight():
    net = small_cnn(1, dtype=np.float64)
    x = np.random.default_rng(5).standard_normal((4, 1, 8, 8))
    report = grad_check(net, x, _ce(np.array([0, 1, 2, 1])), step=1e-5, tolerance=1e-6,
                        oracle_dtype=None)
    assert report.ok, report.failures


def test_grad_check_constant_loss():
    net = small_cnn()
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    report = grad_check(net, x, lambda tr: (3.0, None, None))
    assert report.max_error == 0.0


def test_grad_check_lp_at_minimum():
    # all student tap features equal -> LP loss and its gradient vanish
    net = init_network([dense(3, 4), dense(4, 2)], (3,), 0, tap_index=0)
    x = np.ones((6, 3), dtype=np.float32)
    g = affinity(np.random.default_rng(0).standard_normal((6, 5)), DistillConfig(k=2))

    def evaluate(tr):
        return lp_loss(tr.tapped, g), None, lp_grad(tr.tapped, g)
    report = grad_check(net, x, evaluate)
    assert report.ok
    assert lp_loss(forward(net, x).tapped, g) == 0.0


def test_grad_check_detects_wrong_gradient():
    net = init_network([dense(3, 2)], (3,), 0)
    x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)

    def wrong(tr):
        loss, g, _ = _ce(np.array([0, 1, 0, 1]))(tr)
        return loss, 2 * g, None
    assert not grad_check(net, x, wrong).ok


def test_grad_check_non_finite():
    net = init_network([dense(3, 2)], (3,), 0)
    with pytest.raises(GradCheckError):
        grad_check(net, np.zeros((1, 3), np.float32), lambda tr: (np.nan, None, None))


def test_numerical_grad_quadratic_and_relative_error():
    x = np.array([1.0, -2.0, 3.0])
    (g,) = numerical_grad(lambda: float((x ** 2).sum()), [x])
    np.testing.assert_allclose(g, 2 * x, rtol=1e-9)
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([1.0, 0.0], [1.1, 0.0]) == pytest.approx(0.1 / 1.1)
    assert relative_error([0.0], [0.0]) == 0.0


def test_sgd_scalar_step():
    net = init_network([dense(1, 1)], (1,), 0)
    net.params[0] = [np.array([[1.0]], np.float32), np.array([1.0], np.float32)]
    state = OptimizerState("sgd", lr=0.1)
    optimizer_step(net, [[np.array([[0.5]], np.float32), np.array([0.5], np.float32)]], state)
    assert net.params[0][0][0, 0] == pytest.approx(0.95)
    assert state.steps == 1


def test_rmsprop_scalar_step_matches_formula():
    net = init_network([dense(1, 1)], (1,), 0, dtype=np.float64)
    net.params[0] = [np.array([[1.0]]), np.array([0.0])]
    state = OptimizerState("rmsprop", lr=0.0005, rho=0.9)
    optimizer_step(net, [[np.array([[1.0]]), np.array([0.0])]], state)
    v = 0.1 * 1.0
    expect = 1.0 - 0.0005 * 1.0 / (np.sqrt(v) + 1e-8)
    assert net.params[0][0][0, 0] == pytest.approx(expect, rel=1e-12)
    assert net.params[0][0][0, 0] < 1.0
    assert state.accum[0][0, 0] == pytest.approx(0.1)


def test_zero_gradient_leaves_parameters():
    net = small_cnn()
    before = [a.copy() for a in net.parameters()]
    state = OptimizerState("sgd", lr=0.1, momentum=0.9)
    optimizer_step(net, [[np.zeros_like(a) for a in g] for g in net.params], state)
    for a, b in zip(before, net.parameters()):
        assert np.array_equal(a, b)
    assert all(not a.any() for a in state.accum)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerState("adam")
    with pytest.raises(ValueError):
        OptimizerState(lr=0)
    with pytest.raises(ValueError):
        OptimizerState(rho=1.0)
    net = init_network([dense(2, 2)], (2,), 0)
    with pytest.raises(ValueError):
        optimizer_step(net, [[np.zeros((3, 2)), np.zeros(2)]], OptimizerState())


def test_checkpoint_round_trip(tmp_path):
    net = small_cnn(9)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    assert blob[:4] == b"LPKD" and blob[4] == 1
    back = load_checkpoint(path)
    assert back.specs == net.specs and back.tap_index == net.tap_index
    assert back.input_shape == net.input_shape
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    assert to_bytes(back) == blob
    x = np.random.default_rng(0).random((3, 1, 8, 8)).astype(np.float32)
    assert np.array_equal(predict(net, x), predict(back, x))


def test_checkpoint_errors():
    blob = to_bytes(small_cnn())
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(blob[:4] + bytes([9]) + blob[5:])
    with pytest.raises(CheckpointError, match="byte"):
        from_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        from_bytes(blob + b"\0")


def test_predict_and_features_chunking():
    net = small_cnn()
    x = np.random.default_rng(0).random((7, 1, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(predict(net, x, batch_size=3), forward(net, x).logits,
                               rtol=1e-6, atol=1e-6)
    f = features(net, x, net.tap_index, batch_size=2)
    np.testing.assert_allclose(f, forward(net, x).tapped, rtol=1e-6, atol=1e-6)
