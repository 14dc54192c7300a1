"""Central finite differences against every hand-written backward pass (float64)."""

import numpy as np
import pytest

from mbanet.gradcheck import numerical_grad, rel_error
from mbanet.network import (APL, MBA, Conv2D, Dense, Dropout, Flatten, Maxout, MaxPool2D,
                            ReLU, build_network, init_params, softmax_xent)
from conftest import tiny_spec

EPS = 1e-6
LAYER_TOL = 1e-6
NET_TOL = 1e-5
KINK = 1e-3


def away_from(values, kinks, rng, scale=1.0):
    """Resample entries of ``values`` lying within KINK of any kink location."""
    values = np.array(values)
    for _ in range(100):
        bad = np.zeros(values.shape, bool)
        for k in kinks(values):
            bad |= np.abs(k) <= KINK
        if not bad.any():
            return values
        values[bad] = rng.normal(size=bad.sum()) * scale
    raise RuntimeError("could not avoid kinks")


def check_layer(layer, x, rng):
    """Compare input and parameter gradients of ``sum(out * y)``."""
    y = rng.normal(size=layer.forward(x).shape)
    layer.forward(x)
    gx = layer.backward(y)
    f = lambda: float(np.vdot(layer.forward(x), y))
    assert rel_error(gx, numerical_grad(f, x, EPS)) <= LAYER_TOL
    for name, p in layer.params.items():
        layer.forward(x)
        layer.backward(y)
        analytic = layer.grads[name].copy()
        assert rel_error(analytic, numerical_grad(f, p, EPS)) <= LAYER_TOL, name


def test_conv_layer(rng):
    layer = Conv2D("c", 2, 3)
    layer.params["weight"] = rng.normal(size=(3, 2, 3, 3))
    layer.params["bias"] = rng.normal(size=3)
    check_layer(layer, rng.normal(size=(2, 2, 4, 4)), rng)


def test_dense_layer(rng):
    layer = Dense("fc", 5, 4)
    layer.params["weight"] = rng.normal(size=(5, 4))
    layer.params["bias"] = rng.normal(size=4)
    check_layer(layer, rng.normal(size=(3, 5)), rng)


def test_maxpool_layer(rng):
    # distinct values keep every window's argmax stable under perturbation
    x = rng.permutation(np.arange(2 * 2 * 4 * 4, dtype=float)).reshape(2, 2, 4, 4) * 0.01
    check_layer(MaxPool2D("p"), x, rng)


def test_dropout_off(rng):
    layer = Dropout("d", 0.5)
    check_layer(layer, rng.normal(size=(3, 6)), rng)


def test_dropout_on_fixed_mask(rng):
    layer = Dropout("d", 0.5)
    x = rng.normal(size=(3, 6))
    y = rng.normal(size=(3, 6))
    out = layer.forward(x, training=True, rng=np.random.default_rng(0))
    gx = layer.backward(y)
    mask = out / np.where(x == 0, 1, x)
    np.testing.assert_allclose(gx, y * mask)


def test_relu_layer(rng):
    x = away_from(rng.normal(size=(2, 3, 4)), lambda v: [v], rng)
    check_layer(ReLU("r"), x, rng)


def test_mba_layer(rng):
    layer = MBA("m", 3, 4)
    layer.params["bias"] = rng.normal(size=(3, 4))
    b = layer.params["bias"]
    x = away_from(rng.normal(size=(2, 3, 3, 3)),
                  lambda v: [v + b[None, :, k, None, None] for k in range(4)], rng)
    check_layer(layer, x, rng)


def test_mba_layer_flat_input(rng):
    layer = MBA("m", 5, 2)
    layer.params["bias"] = rng.normal(size=(5, 2))
    b = layer.params["bias"]
    x = away_from(rng.normal(size=(3, 5)), lambda v: [v + b[None, :, k] for k in range(2)], rng)
    check_layer(layer, x, rng)


def test_apl_layer(rng):
    layer = APL("a", 2, 3, (3, 3))
    layer.params["slope"] = rng.normal(size=(3, 3, 3))
    layer.params["hinge"] = rng.normal(size=(3, 3, 3))
    h = layer.params["hinge"]
    x = away_from(rng.normal(size=(2, 2, 3, 3)),
                  lambda v: [v] + [h[k][None, None] - v for k in range(3)], rng)
    check_layer(layer, x, rng)


def test_maxout_layer(rng):
    layer = Maxout("mo", 3, 4)
    # distinct values 0.01 apart: every group max wins by more than the kink margin
    x = rng.permutation(np.arange(2 * 12 * 9, dtype=float)).reshape(2, 12, 3, 3) * 0.01
    check_layer(layer, x, rng)


def test_softmax_xent(rng):
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    _, g = softmax_xent(logits, labels)
    num = numerical_grad(lambda: softmax_xent(logits, labels)[0], logits, 1e-6)
    assert rel_error(g, num) <= 1e-7


def test_flatten_layer(rng):
    check_layer(Flatten("f"), rng.normal(size=(2, 3, 2, 2)), rng)


def _pre_activation_margin(net, x):
    """Smallest |pre-activation + bias| over every kinked unit for input x."""
    margin = np.inf
    h = x
    for layer in net.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, np.abs(h).min())
        elif isinstance(layer, MBA):
            b = layer.params["bias"]
            extra = h.ndim - 2
            margin = min(margin, np.abs(h[:, :, None] + b.reshape(b.shape + (1,) * extra)).min())
        elif isinstance(layer, APL):
            margin = min(margin, np.abs(h).min(),
                         np.abs(layer.params["hinge"][None, None] - h[:, :, None]).min())
        elif isinstance(layer, Maxout):
            s = np.sort(h.reshape((h.shape[0], layer.k, -1)), axis=1)
            margin = min(margin, (s[:, -1] - s[:, -2]).min())
        elif isinstance(layer, MaxPool2D):
            # gap between window max and runner-up
            b_, c, hh, ww = h.shape
            win = h[:, :, :hh // 2 * 2, :ww // 2 * 2].reshape(b_, c, hh // 2, 2, ww // 2, 2)
            s = np.sort(win.transpose(0, 1, 2, 4, 3, 5).reshape(b_, c, hh // 2, ww // 2, 4), axis=-1)
            margin = min(margin, (s[..., -1] - s[..., -2]).min())
        h = layer.forward(h)
    return margin


@pytest.mark.parametrize("activation", ["relu", "mba", "apl", "maxout"])
def test_whole_network(activation):
    net = init_params(build_network(tiny_spec(activation, k=2)), seed=3)
    rng = np.random.default_rng(5)
    for layer in net.layers:
        if isinstance(layer, MBA):
            layer.params["bias"] = rng.normal(size=layer.params["bias"].shape) * 0.3
        if isinstance(layer, APL):
            layer.params["slope"] = rng.normal(size=layer.params["slope"].shape) * 0.3
    for _ in range(50):
        x = rng.normal(size=(2, 2, 8, 8))
        y = rng.integers(0, 3, 2)
        if _pre_activation_margin(net, x) > KINK:
            break
    else:
        pytest.fail("no kink-free input found")

    _, grads, _ = net.loss_and_grads(x, y, training=False)
    grads = {k: v.copy() for k, v in grads.items()}
    f = lambda: softmax_xent(net.forward(x), y)[0]
    sample_rng = np.random.default_rng(0)
    for name, p in net.named_params().items():
        idx = sample_rng.choice(p.size, min(p.size, 12), replace=False)
        num = numerical_grad(f, p, EPS, idx).reshape(-1)[idx]
        assert rel_error(grads[name].reshape(-1)[idx], num, floor=1e-8) <= NET_TOL, name
    # input gradient too
    net.loss_and_grads(x, y, training=False)
    gx = net.input_grad.copy()
    idx = sample_rng.choice(x.size, 20, replace=False)
    num = numerical_grad(f, x, EPS, idx).reshape(-1)[idx]
    assert rel_error(gx.reshape(-1)[idx], num, floor=1e-8) <= NET_TOL


def test_duplicated_sample_doubles_summed_gradient(tiny_net):
    net = tiny_net("mba")
    x = np.random.default_rng(0).normal(size=(1, 2, 8, 8))
    y = np.array([1])
    _, g1, _ = net.loss_and_grads(x, y, training=False)
    g1 = {k: v.copy() for k, v in g1.items()}
    _, g2, _ = net.loss_and_grads(np.concatenate([x, x]), np.array([1, 1]), training=False)
    for k in g1:
        # the loss is a batch mean, so the summed gradient is batch_size * mean gradient
        np.testing.assert_allclose(2 * g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)
        assert np.abs(2 * g2[k]).sum() == pytest.approx(2 * np.abs(g1[k]).sum(), rel=1e-12)
