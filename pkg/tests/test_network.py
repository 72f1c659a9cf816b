import numpy as np
import pytest

from helpers import all_positions, fd_grad, jitter_biases, ref_forward_backward, rel_error
from stochasticnet import network as N
from stochasticnet.connectivity import (
    ConnectivityMask,
    GaussianConnectivityModel,
    probability_map,
)
from stochasticnet.tensor import ShapeError


def naive_conv(x, w, b, pad, stride=1):
    """Six nested loops, dense weights, cross-correlation."""
    n, ic, h, wd = x.shape
    oc, _, k, _ = w.shape
    oh, ow = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for s in range(n):
        for o in range(oc):
            for y in range(oh):
                for xx in range(ow):
                    acc = b[o]
                    for c in range(ic):
                        for i in range(k):
                            for j in range(k):
                                yy, xi = y * stride + i - pad, xx * stride + j - pad
                                if 0 <= yy < h and 0 <= xi < wd:
                                    acc += x[s, c, yy, xi] * w[o, c, i, j]
                    out[s, o, y, xx] = acc
    return out


def conv_layer(gen, oc, ic, k=5, rho=0.75, pad=2, stride=1, seed=0):
    pm = probability_map(GaussianConnectivityModel.preset(k, rho))
    bits = (gen.random((oc, ic, k, k)) < pm.p).astype(np.uint8)
    return N.SparseConv(gen.normal(size=(oc, ic, k, k)), gen.normal(size=oc),
                        ConnectivityMask(bits, seed), stride=stride, padding=pad, rho=rho)


def dense_layer(gen, out, inp, rho=0.75):
    bits = (gen.random((out, inp)) < rho).astype(np.uint8)
    return N.SparseDense(gen.normal(size=(out, inp)), gen.normal(size=out), ConnectivityMask(bits, 0), rho=rho)


# Forward ------------------------------------------------------------------

def test_identity_kernel():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    layer = N.SparseConv(w, np.zeros(1), ConnectivityMask(np.ones((1, 1, 3, 3)), 0), padding=1)
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    assert np.array_equal(N.conv_forward(layer, x), x)


@pytest.mark.parametrize("stride,pad", [(1, 2), (2, 1), (1, 0)])
def test_conv_matches_naive_oracle(stride, pad):
    gen = np.random.default_rng(1)
    layer = conv_layer(gen, 3, 3, rho=1.0, pad=pad, stride=stride)
    x = gen.normal(size=(2, 3, 8, 8))
    got = N.conv_forward(layer, x)
    assert np.abs(got - naive_conv(x, layer.weights, layer.bias, pad, stride)).max() < 1e-10


def test_masked_tap_equals_zeroed_dense_weight():
    gen = np.random.default_rng(2)
    w = gen.normal(size=(2, 3, 5, 5))
    bits = np.ones(w.shape, np.uint8)
    bits[1, 2, 0, 3] = 0
    layer = N.SparseConv(w, np.zeros(2), ConnectivityMask(bits, 0), padding=2)
    w0 = w.copy()
    w0[1, 2, 0, 3] = 0.0
    x = gen.normal(size=(2, 3, 8, 8))
    assert np.abs(N.conv_forward(layer, x) - naive_conv(x, w0, np.zeros(2), 2)).max() < 1e-10


def test_conv_shape_errors():
    gen = np.random.default_rng(0)
    layer = conv_layer(gen, 2, 3)
    with pytest.raises(ShapeError):
        N.conv_forward(layer, np.zeros((1, 4, 8, 8)))
    with pytest.raises(ShapeError):
        N.SparseConv(np.zeros((2, 3, 5, 5)), np.zeros(2), ConnectivityMask(np.ones((2, 3, 3, 3)), 0))


def test_pool_relu_flatten_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert N.maxpool2_forward(x).item() == 4.0
    assert N.maxpool2_backward(x, np.ones((1, 1, 1, 1))).tolist() == [[[[0, 0], [0, 1]]]]
    const = np.full((1, 1, 4, 4), 2.0)
    g = N.maxpool2_backward(const, np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    expect = np.zeros((4, 4))
    expect[0, 0], expect[0, 2], expect[2, 0], expect[2, 2] = 1, 2, 3, 4
    assert np.array_equal(g[0, 0], expect)
    v = np.array([-1.0, 0.0, 2.0])
    assert N.relu_forward(v).tolist() == [0, 0, 2]
    assert N.relu_backward(v, np.ones(3)).tolist() == [0, 0, 1]
    x4 = np.arange(24.0).reshape(2, 3, 2, 2)
    assert N.flatten_forward(x4).shape == (2, 12)
    assert np.array_equal(N.flatten_backward(x4, N.flatten_forward(x4)), x4)
    with pytest.raises(ShapeError):
        N.maxpool2_forward(np.zeros((1, 1, 3, 4)))


def test_dense_identity():
    layer = N.SparseDense(np.eye(4), np.zeros(4), ConnectivityMask(np.ones((4, 4)), 0))
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(N.dense_forward(layer, x), x)


# Loss ---------------------------------------------------------------------

def test_loss_examples():
    loss, grad = N.loss_forward(np.zeros((4, 10)), np.arange(4))
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert np.log(10) == pytest.approx(2.302585, abs=1e-6)
    logits = np.zeros((2, 10))
    logits[[0, 1], [3, 7]] = 20.0
    assert N.loss_forward(logits, np.array([3, 7]))[0] == pytest.approx(np.log1p(9 * np.exp(-20.0)), rel=1e-9)
    with pytest.raises(ValueError):
        N.loss_forward(np.zeros((1, 3)), np.array([3]))


def test_loss_gradient_fd():
    gen = np.random.default_rng(3)
    logits = gen.normal(size=(3, 10))
    labels = np.array([1, 5, 9])
    _, grad = N.loss_forward(logits, labels)
    num = fd_grad(lambda: N.loss_forward(logits, labels)[0], logits, all_positions(logits))
    assert rel_error(grad.ravel(), num).max() < 1e-6


# Backward -----------------------------------------------------------------

def _check_layer_grads(layer, x, gen):
    y, cache = layer.forward(x)
    proj = gen.normal(size=y.shape)
    f = lambda: float(np.sum(layer.forward(x)[0] * proj))
    gx, (gw, gb) = layer.backward(cache, proj)
    surv = all_positions(layer.weights, layer.mask.bits)
    num_w = fd_grad(f, layer.weights, surv)
    assert rel_error(gw[tuple(np.array(surv).T)], num_w).max() < 1e-4
    assert np.all(gw[layer.mask.bits == 0] == 0.0)
    assert rel_error(gb, fd_grad(f, layer.bias, all_positions(layer.bias))).max() < 1e-4
    assert rel_error(gx.ravel(), fd_grad(f, x, all_positions(x))).max() < 1e-4


@pytest.mark.parametrize("rho", [0.75, 1.0])
def test_conv_backward_fd(rho):
    gen = np.random.default_rng(4)
    layer = conv_layer(gen, 3, 2, rho=rho)
    _check_layer_grads(layer, gen.normal(size=(1, 2, 6, 6)), gen)


@pytest.mark.parametrize("oc,ic,stride,pad", [(2, 4, 1, 2), (3, 2, 2, 1), (3, 3, 1, 0)])
def test_conv_backward_paths_fd(oc, ic, stride, pad):
    gen = np.random.default_rng(oc * 10 + ic)
    layer = conv_layer(gen, oc, ic, rho=0.75, pad=pad, stride=stride)
    _check_layer_grads(layer, gen.normal(size=(2, ic, 7, 7)), gen)


@pytest.mark.parametrize("rho", [0.75, 1.0])
def test_dense_backward_fd(rho):
    gen = np.random.default_rng(5)
    layer = dense_layer(gen, 6, 9, rho=rho)
    _check_layer_grads(layer, gen.normal(size=(4, 9)), gen)


def test_zero_upstream_gives_zero_grads():
    gen = np.random.default_rng(6)
    layer = conv_layer(gen, 3, 2)
    x = gen.normal(size=(1, 2, 6, 6))
    gx, gw, gb = N.conv_backward(layer, x, np.zeros((1, 3, 6, 6)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_pool_relu_backward_fd():
    gen = np.random.default_rng(7)
    x = gen.normal(size=(2, 3, 4, 6))
    proj = gen.normal(size=(2, 3, 2, 3))
    g = N.maxpool2_backward(x, proj)
    num = fd_grad(lambda: float(np.sum(N.maxpool2_forward(x) * proj)), x, all_positions(x))
    assert rel_error(g.ravel(), num).max() < 1e-4
    proj = gen.normal(size=x.shape)
    g = N.relu_backward(x, proj)
    num = fd_grad(lambda: float(np.sum(N.relu_forward(x) * proj)), x, all_positions(x))
    assert rel_error(g.ravel(), num).max() < 1e-4


# Network ------------------------------------------------------------------

def small_net(rho, seed=3):
    return N.build_network(2, 8, 4, rho, seed, conv_channels=(3, 3, 4), hidden=6)


@pytest.mark.parametrize("rho", [0.75, 1.0])
def test_network_gradients_fd(rho):
    net = small_net(rho)
    gen = np.random.default_rng(8)
    jitter_biases(net, gen)
    x = gen.normal(size=(4, 2, 8, 8))
    labels = np.array([0, 1, 2, 3])
    loss, _, grads = net.loss_and_grads(x, labels)
    f = lambda: N.loss_forward(net.forward(x), labels)[0]
    for layer, g in zip(net.layers, grads):
        if not layer.has_params:
            assert g is None
            continue
        gw, gb = g
        surv = all_positions(layer.weights, layer.mask.bits)
        num = fd_grad(f, layer.weights, surv)
        assert rel_error(gw[tuple(np.array(surv).T)], num).max() < 1e-4
        assert np.all(gw[layer.mask.bits == 0] == 0.0)
        assert rel_error(gb, fd_grad(f, layer.bias, all_positions(layer.bias))).max() < 1e-4


def _ref_params(net):
    return [(l.kind, l.weights, l.bias) for l in net.masked_layers]


def test_dense_equivalence_with_reference():
    net = N.build_paper_architecture(3, 32, 10, 1.0, seed=21)
    assert all(l.mask.realized_fraction == 1.0 for l in net.masked_layers)
    gen = np.random.default_rng(9)
    x = gen.normal(size=(4, 3, 32, 32))
    labels = gen.integers(0, 10, size=4)
    loss, logits, grads = net.loss_and_grads(x, labels)
    r_logits, r_loss, r_grads = ref_forward_backward(_ref_params(net), x, labels, 10)
    assert np.abs(logits - r_logits).max() < 1e-10
    assert abs(loss - r_loss) < 1e-10
    for (gw, gb), (rw, rb) in zip([g for g in grads if g is not None], r_grads):
        assert np.abs(gw - rw).max() < 1e-10
        assert np.abs(gb - rb).max() < 1e-10


def test_default_architecture_shapes():
    net = N.build_paper_architecture(3, 32, 10, 0.75, seed=1)
    assert [l.mask.shape for l in net.conv_layers] == [(32, 3, 5, 5), (32, 32, 5, 5), (64, 32, 5, 5)]
    assert [l.mask.shape for l in net.dense_layers] == [(64, 1024), (10, 64)]
    assert net.shape_chain() == [
        (3, 32, 32),
        (32, 32, 32), (32, 32, 32), (32, 16, 16),
        (32, 16, 16), (32, 16, 16), (32, 8, 8),
        (64, 8, 8), (64, 8, 8), (64, 4, 4),
        (1024,), (64,), (64,), (10,),
    ]
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    assert net.forward(x).shape == (2, 10)
    with pytest.raises(ShapeError):
        N.build_paper_architecture(3, 36, 10, 0.75, seed=1)


def test_parameter_count_binomial():
    rho = 0.75
    net = N.build_paper_architecture(3, 32, 10, rho, seed=4)
    pm = probability_map(GaussianConnectivityModel.preset(5, rho))
    mean = var = 0.0
    for l in net.conv_layers:
        reps = l.weights.shape[0] * l.weights.shape[1]
        mean += reps * pm.p.sum()
        var += reps * (pm.p * (1 - pm.p)).sum()
    for l in net.dense_layers:
        mean += l.weights.size * rho
        var += l.weights.size * rho * (1 - rho)
    surviving = sum(l.mask.surviving for l in net.masked_layers)
    dense_count = sum(l.weights.size for l in net.masked_layers)
    assert mean == pytest.approx(rho * dense_count)
    assert abs(surviving - mean) <= 5 * np.sqrt(var)


def test_masked_weights_zero_and_determinism():
    a = N.build_paper_architecture(3, 32, 10, 0.75, seed=11)
    b = N.build_paper_architecture(3, 32, 10, 0.75, seed=11)
    x = np.random.default_rng(1).random((2, 3, 32, 32))
    for la, lb in zip(a.masked_layers, b.masked_layers):
        assert np.all(la.weights[la.mask.bits == 0] == 0.0)
        assert np.array_equal(la.weights, lb.weights) and la.mask == lb.mask
    assert np.array_equal(a.forward(x), b.forward(x))
    c = N.build_paper_architecture(3, 32, 10, 0.75, seed=12)
    assert not np.array_equal(a.conv_layers[0].mask.bits, c.conv_layers[0].mask.bits)


def test_init_scale_uses_surviving_fans():
    net = N.build_paper_architecture(3, 32, 10, 0.75, seed=2)
    layer = net.conv_layers[1]
    bits = layer.mask.bits
    fan_in = bits.reshape(32, -1).sum(1).mean()
    fan_out = bits.transpose(1, 0, 2, 3).reshape(32, -1).sum(1).mean()
    a = np.sqrt(6 / (fan_in + fan_out))
    w = layer.weights[bits == 1]
    assert np.abs(w).max() <= a
    assert np.abs(w).max() > 0.95 * a


def test_frozen_layers_pass_gradient_but_report_none():
    net = small_net(0.75)
    for l in net.conv_layers:
        l.frozen = True
    x = np.random.default_rng(2).normal(size=(3, 2, 8, 8))
    logits, caches = net.forward_train(x)
    _, g = N.loss_forward(logits, np.array([0, 1, 2]))
    grads, gin = net.backward(caches, g, need_input_grad=True)
    assert all(gr is None for l, gr in zip(net.layers, grads) if l.kind == "conv")
    assert all(gr is not None for l, gr in zip(net.layers, grads) if l.kind == "dense")
    assert gin.shape == x.shape and np.abs(gin).sum() > 0
