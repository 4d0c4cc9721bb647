import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wmr import core
from wmr.core import (Conv2d, Dropout, LayerParams, Linear, MaxPool2d, ReLU, Sequential, TrainConfig,
                      conv2d, cross_entropy_loss, dropout, fully_connected, grad_check, max_pool2d,
                      relu, sgd_step, softmax, softmax_cross_entropy_backward)
from wmr.errors import ConfigurationError, InputError, NumericError, ParseError

from oracles import conv2d_naive, matvec_naive, max_pool_naive


def params(w, b):
    return LayerParams(np.asarray(w, float), np.asarray(b, float))


# ------------------------------------------------------------------ conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((1, 5, 5))
    out = conv2d(x, params(np.ones((1, 1, 1, 1)), [0.0]))
    np.testing.assert_array_equal(out, x)


def test_conv_zero_input_gives_zero():
    rng = np.random.default_rng(1)
    out = conv2d(np.zeros((2, 6, 6)), params(rng.normal(size=(3, 2, 3, 3)), np.zeros(3)), pad=1)
    assert not out.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 6))
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    np.testing.assert_allclose(conv2d(x, params(w, b), stride, pad), conv2d_naive(x, w, b, stride, pad),
                               rtol=0, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ConfigurationError):
        conv2d(np.zeros((3, 4, 4)), params(np.zeros((1, 2, 3, 3)), [0.0]))
    with pytest.raises(ConfigurationError):
        conv2d(np.zeros((1, 2, 2)), params(np.zeros((1, 1, 3, 3)), [0.0]))


# ------------------------------------------------------------------ pooling

def test_pool_constant_and_small():
    np.testing.assert_array_equal(max_pool2d(np.full((2, 4, 4), 3.0), 2), np.full((2, 2, 2), 3.0))
    assert max_pool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2).item() == 4.0


def test_pool_matches_naive():
    x = np.random.default_rng(3).normal(size=(1, 8, 8))
    np.testing.assert_array_equal(max_pool2d(x, 2, 2), max_pool_naive(x, 2, 2))
    np.testing.assert_array_equal(max_pool2d(x, 3, 2), max_pool_naive(x, 3, 2))


def test_pool_window_too_large():
    with pytest.raises(ConfigurationError):
        max_pool2d(np.zeros((1, 2, 2)), 3)


def test_pool_backward_tie_goes_to_first_cell():
    x = np.ones((1, 2, 2))
    out, cache = core.max_pool2d_forward(x, 2, 2)
    dx = core.max_pool2d_backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(dx, [[[1.0, 0.0], [0.0, 0.0]]])


# ------------------------------------------------------------------ dense / activations

def test_fc_identity_and_bias():
    x = np.arange(4.0)
    np.testing.assert_array_equal(fully_connected(x, params(np.eye(4), np.zeros(4))), x)
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(fully_connected(x, params(np.zeros((3, 4)), b)), b)


def test_fc_matches_naive():
    rng = np.random.default_rng(4)
    w, b, x = rng.normal(size=(5, 7)), rng.normal(size=5), rng.normal(size=7)
    np.testing.assert_allclose(fully_connected(x, params(w, b)), matvec_naive(w, b, x), atol=1e-12)


def test_fc_length_mismatch():
    with pytest.raises(ConfigurationError):
        fully_connected(np.zeros(3), params(np.zeros((2, 4)), np.zeros(2)))


def test_relu_cases():
    np.testing.assert_array_equal(relu(-np.arange(1.0, 5.0)), np.zeros(4))
    np.testing.assert_array_equal(relu(np.arange(1.0, 5.0)), np.arange(1.0, 5.0))
    x = np.random.default_rng(5).normal(size=50)
    np.testing.assert_array_equal(relu(x), np.array([v if v > 0 else 0.0 for v in x]))
    np.testing.assert_array_equal(core.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])


# ------------------------------------------------------------------ softmax / cross entropy

def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(4)), [0.25] * 4)
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)
    e = [math.exp(v) for v in (1, 2, 3)]
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), [v / sum(e) for v in e], rtol=0, atol=1e-15)
    with pytest.raises(ConfigurationError):
        softmax(np.array([]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_simplex_and_argmax(x):
    p = softmax(x)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    assert np.argmax(p) == np.argmax(x) or p[np.argmax(p)] == p[np.argmax(x)]


def test_cross_entropy_examples():
    assert cross_entropy_loss(np.array([0.0, 1.0, 0.0]), 1) == 0.0
    assert cross_entropy_loss(np.full(5, 0.2), 3) == pytest.approx(math.log(5))
    assert cross_entropy_loss(np.array([0.7, 0.3]), 1) == pytest.approx(1.2039728043259361, abs=1e-12)
    assert cross_entropy_loss(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(InputError):
        cross_entropy_loss(np.array([0.5, 0.5]), 2)


# ------------------------------------------------------------------ dropout

def test_dropout_identity_cases():
    x = np.random.default_rng(6).random(100)
    np.testing.assert_array_equal(dropout(x, 0.0, "train", np.random.default_rng(0))[0], x)
    np.testing.assert_array_equal(dropout(x, 0.9, "eval")[0], x)
    with pytest.raises(ConfigurationError):
        dropout(x, 1.0)


def test_dropout_preserves_expectation():
    out, mask = dropout(np.ones(10 ** 6), 0.6, "train", np.random.default_rng(7))
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.4}


# ------------------------------------------------------------------ SGD

def test_sgd_examples():
    p = params(np.array([1.0]), np.array([0.0]))
    sgd_step([p], TrainConfig(learning_rate=0.1), 0)
    assert p.weights[0] == 1.0  # zero gradients
    p.grad_weights[0] = 1.0
    sgd_step([p], TrainConfig(learning_rate=0.1), 0)
    assert p.weights[0] == pytest.approx(0.9)
    assert p.grad_weights[0] == 0.0


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1e-4, lr_decay_every=50000)
    assert cfg.lr_at(100000) == pytest.approx(1e-6)
    lrs = [cfg.lr_at(i) for i in range(0, 200001, 1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cfg.lr_at(49999) == cfg.lr_at(0) and cfg.lr_at(50000) < cfg.lr_at(49999)


def test_sgd_rejects_non_finite_without_update():
    a = params(np.array([1.0]), np.array([0.0]))
    b = params(np.array([2.0]), np.array([0.0]))
    a.grad_weights[0] = 1.0
    b.grad_weights[0] = np.nan
    with pytest.raises(NumericError):
        sgd_step([a, b], TrainConfig(learning_rate=0.1), 0)
    assert a.weights[0] == 1.0 and b.weights[0] == 2.0


def test_gradient_clip_only_scales_large_steps():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(2, 5))
    norm = float(np.linalg.norm(grads))

    def step(max_norm):
        ps = [params(np.zeros(5), np.zeros(1)) for _ in range(2)]
        for p, g in zip(ps, grads):
            p.grad_weights[:] = g
        sgd_step(ps, TrainConfig(learning_rate=0.5, max_grad_norm=max_norm), 0)
        return np.concatenate([p.weights for p in ps])

    plain = step(np.inf)
    assert np.array_equal(step(norm * 1.01), plain)
    clipped = step(norm / 4)
    assert np.linalg.norm(clipped) == pytest.approx(0.5 * norm / 4)
    assert np.allclose(clipped, plain / 4)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(max_grad_norm=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(dropout_ratio=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_images=0)


# ------------------------------------------------------------------ gradient checks

def test_grad_check_quadratic():
    x = np.random.default_rng(8).normal(size=20)
    assert grad_check(lambda v: (float((v ** 2).sum()), 2 * v), x) < 1e-8


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(9)
    s = rng.normal(size=6)

    def fn(v):
        p = softmax(v)
        return cross_entropy_loss(p, 2), softmax_cross_entropy_backward(p, 2)

    assert grad_check(fn, s) < 1e-6


def _composite(rng):
    conv = Conv2d(2, 3, 3, 1, 1, rng)
    fc = Linear(3 * 5 * 5, 4, rng)
    head = rng.normal(size=4)
    return Sequential([conv, ReLU(), fc]), head


def test_grad_check_conv_relu_fc_input():
    rng = np.random.default_rng(10)
    net, head = _composite(rng)
    x = rng.normal(size=(2, 5, 5))

    def fn(v):
        out = net.forward(v)
        return float(out @ head), net.backward(head.copy())

    assert grad_check(fn, x) < 1e-4


@pytest.mark.parametrize("which", ["weights", "biases"])
def test_grad_check_conv_relu_fc_params(which):
    rng = np.random.default_rng(11)
    net, head = _composite(rng)
    x = rng.normal(size=(2, 5, 5))
    conv_params = net.layers[0].params
    target = getattr(conv_params, which)

    def fn(v):
        target[...] = v
        for p in net.parameters():
            p.zero_grad()
        out = net.forward(x)
        net.backward(head.copy())
        return float(out @ head), getattr(conv_params, "grad_" + which).copy()

    assert grad_check(fn, target.copy()) < 1e-4


def test_grad_check_pool_and_fixed_dropout():
    rng = np.random.default_rng(12)
    drop = Dropout(0.5, rng)
    drop.fixed_mask = (rng.random((1, 18)) < 0.5) / 0.5
    net = Sequential([MaxPool2d(2, 2), ReLU()])
    fc = Linear(18, 3, rng)
    head = rng.normal(size=3)
    x = rng.normal(size=(2, 6, 6))

    def fn(v):
        h = net.forward(v).reshape(1, -1)
        h2 = drop.forward(h, train=True)
        out = fc.forward(h2)[0]
        g = drop.backward(fc.backward(head.reshape(1, -1)))
        return float(out @ head), net.backward(g.reshape(2, 3, 3))

    assert grad_check(fn, x) < 1e-4


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    tensors = {"a.weights": rng.normal(size=(3, 2, 3, 3)), "a.biases": rng.normal(size=3), "s": np.array(2.5)}
    core.save_checkpoint(tmp_path / "m.wmr", tensors)
    raw = (tmp_path / "m.wmr").read_bytes()
    assert raw[:4] == b"WMR1" and int.from_bytes(raw[4:6], "little") == 1
    back = core.load_checkpoint(tmp_path / "m.wmr")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], "<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ParseError):
        core.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(b"WMR1\x01\x00\x05\x00\x00\x00")
    with pytest.raises(ParseError):
        core.load_checkpoint(tmp_path / "short")
