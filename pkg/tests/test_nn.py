import math

import numpy as np
import pytest

from spectronet import nn
from spectronet.errors import ShapeError, StateError


def conv64(in_ch, out_ch, k=3, bias=True, seed=0):
    return nn.Conv1d(in_ch, out_ch, k, bias=bias, rng=np.random.default_rng(seed), dtype=np.float64)


def col(v):
    """(L,) -> (1, L, 1)"""
    return np.asarray(v, dtype=np.float64)[None, :, None]


# ---------------------------------------------------------------- conv1d

def test_conv_identity_kernel():
    c = conv64(1, 1)
    c.params["weight"][:] = [[[0.0, 1.0, 0.0]]]
    x = col([3.0, -1.0, 2.0, 5.0])
    np.testing.assert_array_equal(c.forward(x), x)


def test_conv_hand_example():
    c = conv64(1, 1)
    c.params["weight"][:] = 1.0
    np.testing.assert_array_equal(c.forward(col([0.0, 1.0, 0.0]))[0, :, 0], [1.0, 1.0, 1.0])


def test_conv_is_cross_correlation():
    c = conv64(1, 1)
    c.params["weight"][:] = [[[1.0, 2.0, 3.0]]]
    # out[l] = 1*x[l-1] + 2*x[l] + 3*x[l+1]
    np.testing.assert_array_equal(c.forward(col([1.0, 0.0, 0.0]))[0, :, 0], [2.0, 1.0, 0.0])


def test_conv_zero_weights_bias():
    c = conv64(2, 3)
    c.params["weight"][:] = 0.0
    c.params["bias"][:] = [1.5, -2.0, 0.25]
    out = c.forward(np.random.default_rng(1).normal(size=(2, 9, 2)))
    np.testing.assert_array_equal(out, np.broadcast_to([1.5, -2.0, 0.25], (2, 9, 3)))


def test_conv_keeps_length_and_checks_channels():
    c = conv64(2, 4, k=5)
    assert c.forward(np.zeros((3, 11, 2))).shape == (3, 11, 4)
    assert c.forward(np.zeros((1, 2, 2))).shape == (1, 2, 4)
    with pytest.raises(ShapeError):
        c.forward(np.zeros((3, 11, 3)))
    with pytest.raises(ShapeError):
        nn.Conv1d(1, 1, 4)


def test_conv_identity_backward_ones():
    c = conv64(1, 1)
    c.params["weight"][:] = [[[0.0, 1.0, 0.0]]]
    x = col(np.arange(6.0))
    c.forward(x)
    np.testing.assert_array_equal(c.backward(np.ones_like(x)), np.ones_like(x))


def test_conv_zero_upstream():
    c = conv64(2, 2)
    c.zero_grad()
    c.forward(np.random.default_rng(0).normal(size=(2, 7, 2)))
    c.backward(np.zeros((2, 7, 2)))
    assert not np.any(c.grads["weight"]) and not np.any(c.grads["bias"])


def test_conv_random_small_case():
    c = conv64(2, 2, seed=4)
    x = np.random.default_rng(5).normal(size=(2, 7, 2))
    assert nn.grad_check(nn.Sequential([c]), x) < 1e-6


def test_conv_linear():
    rng = np.random.default_rng(2)
    c = conv64(3, 4, k=5, bias=False)
    x, y = rng.normal(size=(2, 2, 13, 3))
    a, b = 1.7, -0.6
    np.testing.assert_allclose(c.forward(a * x + b * y), a * c.forward(x) + b * c.forward(y), atol=1e-12)


def test_backward_without_forward():
    with pytest.raises(StateError):
        conv64(1, 1).backward(np.zeros((1, 3, 1)))
    c = conv64(1, 1)
    c.forward(np.zeros((1, 3, 1)), train=False)
    with pytest.raises(StateError):
        c.backward(np.zeros((1, 3, 1)))


# ---------------------------------------------------------------- finite differences, 100 trials

@pytest.mark.parametrize("kind", ["conv", "bn", "relu", "linear"])
def test_fd_100_trials(kind):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng((17, trial))
        B, L, C = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(1, 4))
        x = rng.normal(size=(B, L, C))
        if kind == "conv":
            k = int(rng.choice([1, 3, 5]))
            layer = nn.Conv1d(C, int(rng.integers(1, 4)), k, bias=bool(trial % 2), rng=rng, dtype=np.float64)
        elif kind == "bn":
            layer = nn.BatchNorm1d(C, dtype=np.float64)
            layer.params["gamma"][:] = rng.uniform(0.5, 2.0, C)
            layer.params["beta"][:] = rng.normal(size=C)
        elif kind == "relu":
            layer = nn.ReLU()
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep off the kink
        else:
            layer = nn.Linear(C, int(rng.integers(1, 4)), rng=rng, dtype=np.float64)
        worst = max(worst, nn.grad_check(nn.Sequential([layer]), x, seed=trial))
    assert worst < 1e-5


# ---------------------------------------------------------------- batchnorm

def test_bn_constant_input_gives_beta():
    bn = nn.BatchNorm1d(2, dtype=np.float64)
    bn.params["beta"][:] = [0.3, -1.0]
    out = bn.forward(np.full((4, 5, 2), 7.0))
    np.testing.assert_allclose(out, np.broadcast_to([0.3, -1.0], (4, 5, 2)), atol=1e-12)


def test_bn_standardizes():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(64, 32, 1))
    x = 5.0 + 2.0 * (z - z.mean()) / z.std()
    out = nn.BatchNorm1d(1, dtype=np.float64).forward(x)
    assert abs(out.mean()) < 1e-12
    assert out.var() == pytest.approx(4.0 / (4.0 + nn.BN_EPS), rel=1e-12)


def test_bn_inverse_affine_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(8, 10, 3))
    out = nn.BatchNorm1d(3, dtype=np.float64).forward(x)
    mean, var = x.mean(axis=(0, 1)), x.var(axis=(0, 1))
    np.testing.assert_allclose(out * np.sqrt(var + nn.BN_EPS) + mean, x, atol=1e-12)


def test_bn_running_stats_and_eval():
    bn = nn.BatchNorm1d(1, dtype=np.float64)
    with pytest.raises(StateError):
        bn.forward(np.zeros((1, 3, 1)), train=False)
    x = col([1.0, 2.0, 3.0, 6.0])
    bn.forward(x)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * 3.0)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))
    a = bn.forward(x, train=False)
    b = bn.forward(x, train=False)
    np.testing.assert_array_equal(a, b)
    assert int(bn.buffers["num_batches"][0]) == 1


def test_grad_check_degenerate_bn():
    bn = nn.Sequential([nn.BatchNorm1d(2, dtype=np.float64)])
    with pytest.warns(nn.DegenerateCheckWarning):
        assert math.isnan(nn.grad_check(bn, np.ones((1, 1, 2))))


# ---------------------------------------------------------------- relu / linear

def test_relu_values():
    np.testing.assert_array_equal(nn.ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_relu_grad_check_positive():
    x = np.random.default_rng(0).uniform(0.5, 2.0, size=(2, 5, 3))
    assert nn.grad_check(nn.Sequential([nn.ReLU()]), x) < 1e-9


def test_linear_identity():
    lin = nn.Linear(3, 3, dtype=np.float64)
    lin.params["weight"][:] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(lin.forward(x), x)
    with pytest.raises(ShapeError):
        lin.forward(np.zeros((2, 4)))


def test_linear_random_grad_check():
    lin = nn.Linear(4, 2, rng=np.random.default_rng(1), dtype=np.float64)
    assert nn.grad_check(nn.Sequential([lin]), np.random.default_rng(2).normal(size=(3, 5, 4))) < 1e-6


# ---------------------------------------------------------------- stacks

def test_conv_bn_relu_stack():
    rng = np.random.default_rng(7)
    layers = []
    for i, (a, b) in enumerate([(1, 4), (4, 4), (4, 4)]):
        layers += [nn.Conv1d(a, b, 3, rng=rng, dtype=np.float64), nn.BatchNorm1d(b, dtype=np.float64), nn.ReLU()]
    assert nn.grad_check(nn.Sequential(layers), rng.normal(size=(3, 10, 1))) < 1e-5


def test_grad_check_leaves_model_untouched():
    c = conv64(1, 2)
    before = c.params["weight"].copy()
    nn.grad_check(nn.Sequential([c]), np.ones((1, 4, 1)))
    np.testing.assert_array_equal(c.params["weight"], before)
    assert c.params["weight"].dtype == np.float64


# ---------------------------------------------------------------- sgd / schedule

def test_sgd_plain_step():
    theta, g, v = np.array([5.0]), np.array([2.0]), np.zeros(1)
    nn.sgd_step([theta], [g], [v], lr=1.0, momentum=0.0)
    assert theta[0] == 3.0


def test_sgd_momentum_two_steps():
    theta, v = np.array([0.0]), np.zeros(1)
    for _ in range(2):
        nn.sgd_step([theta], [np.array([1.0])], [v], lr=0.1, momentum=0.9)
    assert theta[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_zero_grad_inertia():
    theta, v = np.array([1.0]), np.array([0.5])
    nn.sgd_step([theta], [np.zeros(1)], [v], lr=0.1, momentum=0.9)
    assert theta[0] == pytest.approx(1.0 - 0.1 * 0.9 * 0.5, abs=1e-15)


def test_sgd_no_momentum_is_gradient_descent():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=5)
    ref = theta.copy()
    v = np.zeros(5)
    for _ in range(10):
        g = rng.normal(size=5)
        nn.sgd_step([theta], [g], [v], lr=0.3, momentum=0.0)
        ref = ref - 0.3 * g
    np.testing.assert_array_equal(theta, ref)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(3)], 0.1, 0.0)


def test_cosine_lr():
    assert nn.cosine_lr(0, 200, 1.0, 75) == 1.0
    assert nn.cosine_lr(74, 200, 1.0, 75) == 1.0
    assert nn.cosine_lr(200, 200, 1.0, 75) == pytest.approx(0.0, abs=1e-15)
    assert nn.cosine_lr(137.5, 200, 1.0, 75) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        nn.cosine_lr(0, 75, 1.0, 75)
