import numpy as np
import pytest

from ditherprop.model import (EXACT, BackpropMode, ConvGeometry, Conv2d, Dense, Flatten, MaxPool2,
                              MissingCacheError, Network, build, col2im, im2col, lenet5, mlp,
                              softmax_xent)
from ditherprop.tensor import Rng, ShapeError


def loss_of(net, x, y):
    return softmax_xent(net.forward(x), y)[0]


def fd_check(net, x, y, h=1e-5):
    """Max relative error between backprop and central differences over all parameters."""
    _, dlog = softmax_xent(net.forward(x), y)
    net.backward(dlog)
    worst = 0.0
    for layer in net.weighted:
        for name, grad in (("W", layer.grad_W), ("b", layer.grad_b)):
            p = getattr(layer, name)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                lp = loss_of(net, x, y)
                p[idx] = old - h
                lm = loss_of(net, x, y)
                p[idx] = old
                num = (lp - lm) / (2 * h)
                worst = max(worst, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-7))
    return worst


def test_forward_identity_relu():
    layer = Dense(2, 2)
    layer.W, layer.b = np.eye(2), np.zeros((2, 1))
    np.testing.assert_array_equal(layer.forward(np.array([[1.0], [-1.0]]), EXACT), [[1.0], [0.0]])


def test_zero_weights_zero_logits():
    net = mlp([4, 3, 2])
    for layer in net.weighted:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    np.testing.assert_array_equal(net.forward(np.ones((5, 4))), np.zeros((2, 5)))


def test_forward_matches_straight_line_recompute():
    net = mlp([6, 5, 3], seed=4)
    x = np.random.default_rng(0).normal(size=(7, 6))
    (w1, b1), (w2, b2) = [(l.W, l.b) for l in net.weighted]
    want = w2 @ np.maximum(w1 @ x.T + b1, 0) + b2
    np.testing.assert_allclose(net.forward(x), want, rtol=1e-13)


def test_finite_differences_two_layer():
    net = mlp([5, 4, 3], seed=1)
    rng = np.random.default_rng(1)
    assert fd_check(net, rng.normal(size=(6, 5)), rng.integers(0, 3, 6)) <= 1e-6


def test_finite_differences_conv_pool_net():
    spec = {"input_shape": [2, 6, 6], "layers": [
        {"type": "conv", "out": 3, "kernel": 3, "padding": 1},
        {"type": "pool"},
        {"type": "conv", "out": 2, "kernel": 2, "stride": 1},
        {"type": "dense", "out": 5}]}
    net = build(spec, 72, 3, seed=2)
    rng = np.random.default_rng(2)
    assert fd_check(net, rng.normal(size=(3, 72)), rng.integers(0, 3, 3)) <= 1e-6


def test_zero_output_gradient_gives_zero_grads_in_every_mode():
    net = mlp([5, 6, 4, 3], seed=0)
    x = np.random.default_rng(0).normal(size=(4, 5))
    modes = [EXACT, BackpropMode("dithered", s=2), BackpropMode("meprop", k=2),
             BackpropMode("exact_8bit"), BackpropMode("dithered_8bit", s=2)]
    for mode in modes:
        net.forward(x, mode)
        net.backward(np.zeros((3, 4)), mode, Rng(0))
        for g in net.gradients():
            assert not np.any(g)


def test_meprop_gradient_is_masked_exact_gradient():
    # single layer: the top-k mask applies directly to the exact delta_z
    net = mlp([6, 8], seed=3)
    x = np.random.default_rng(3).normal(size=(5, 6))
    y = np.arange(5) % 8
    _, dlog = softmax_xent(net.forward(x), y)
    mode = BackpropMode("meprop", k=3)
    net.backward(dlog, mode)
    keep = np.zeros_like(dlog, dtype=bool)
    order = np.argsort(-np.abs(dlog), axis=0, kind="stable")[:3]
    np.put_along_axis(keep, order, True, axis=0)
    dz = np.where(keep, dlog, 0.0)
    a_prev = net.weighted[0].cache_a_prev
    np.testing.assert_allclose(net.weighted[0].grad_W, dz @ a_prev.T, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(net.weighted[0].grad_b, dz.sum(axis=1, keepdims=True), atol=1e-15)


def test_dithered_gradients_unbiased_small():
    net = mlp([5, 6, 3], seed=5)
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
    _, dlog = softmax_xent(net.forward(x), y)
    net.backward(dlog)
    exact = np.concatenate([g.ravel() for g in net.gradients()])
    mode = BackpropMode("dithered", s=2)
    samples = []
    for r in range(2000):
        net.forward(x, mode)
        net.backward(dlog, mode, Rng(1, (r,)))
        samples.append(np.concatenate([g.ravel() for g in net.gradients()]))
    samples = np.array(samples)
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    ok = np.where(se > 0, np.abs(samples.mean(axis=0) - exact) <= 5 * se,
                  np.abs(samples.mean(axis=0) - exact) <= 1e-12)
    assert ok.mean() >= 0.999
    # bounded error: no draw strays beyond a loose envelope of the exact gradient
    assert np.all(np.isfinite(samples))


def test_backward_before_forward():
    net = mlp([3, 2])
    with pytest.raises(MissingCacheError):
        net.backward(np.zeros((2, 1)))


def test_dithered_needs_rng():
    net = mlp([3, 2])
    net.forward(np.ones((1, 3)))
    with pytest.raises(ValueError):
        net.backward(np.zeros((2, 1)), BackpropMode("dithered", s=1))


def test_mode_validation():
    with pytest.raises(ValueError):
        BackpropMode("nope")
    with pytest.raises(ValueError):
        BackpropMode("dithered")
    with pytest.raises(ValueError):
        BackpropMode("dithered", s=0.5)
    with pytest.raises(ValueError):
        BackpropMode("meprop")


def test_eight_bit_forward_uses_quantized_operands():
    net = mlp([4, 3], seed=0)
    x = np.random.default_rng(0).normal(size=(2, 4))
    out = net.forward(x, BackpropMode("exact_8bit"))
    layer = net.weighted[0]
    step = np.max(np.abs(layer.W)) / 127
    lv = layer.cache_w / step
    np.testing.assert_allclose(lv, np.round(lv), atol=1e-9)
    assert not np.array_equal(out, net.forward(x))


def test_im2col_examples():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    cols = im2col(x, ConvGeometry(2, 1, 1))
    np.testing.assert_array_equal(cols, x.reshape(2, -1))
    img = np.arange(9.0).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(im2col(img, ConvGeometry(1, 1, 3)), np.arange(9.0).reshape(9, 1))


def conv_oracle(x, w, b, geo):
    c, bt, h, wd = x.shape
    p, k, st = geo.padding, geo.kernel, geo.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = geo.out_size(h, wd)
    out = np.zeros((geo.out_channels, bt, oh, ow))
    w4 = w.reshape(geo.out_channels, c, k, k)
    for o in range(geo.out_channels):
        for n in range(bt):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o, 0]
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += w4[o, ci, ki, kj] * xp[ci, n, i * st + ki, j * st + kj]
                    out[o, n, i, j] = acc
    return out


@pytest.mark.parametrize("geo,hw", [(ConvGeometry(2, 3, 3, 1, 1), 5), (ConvGeometry(3, 2, 2, 2, 0), 6),
                                    (ConvGeometry(1, 4, 3, 2, 1), 7)])
def test_conv_matches_nested_loops(geo, hw):
    rng = Rng(1)
    layer = Conv2d(geo, relu=False, rng=rng)
    x = np.random.default_rng(1).normal(size=(geo.in_channels, 2, hw, hw))
    np.testing.assert_allclose(layer.forward(x, EXACT), conv_oracle(x, layer.W, layer.b, geo),
                               rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    geo = ConvGeometry(2, 1, 3, 2, 1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 7, 7))
    cols = im2col(x, geo)
    y = rng.normal(size=cols.shape)
    assert np.sum(cols * y) == pytest.approx(np.sum(x * col2im(y, geo, x.shape)), rel=1e-12)


def test_bad_geometry():
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 1, 4, 4)), ConvGeometry(1, 1, 3, 2, 0))
    with pytest.raises(ShapeError):
        im2col(np.zeros((2, 1, 4, 4)), ConvGeometry(1, 1, 3))
    with pytest.raises(ShapeError):
        mlp([4, 2]).forward(np.zeros((3, 5)))


def test_maxpool_routes_to_argmax():
    pool = MaxPool2()
    x = np.array([[[[1.0, 2.0], [4.0, 3.0]]]])
    np.testing.assert_array_equal(pool.forward(x, EXACT), [[[[4.0]]]])
    np.testing.assert_array_equal(pool.backward(np.array([[[[5.0]]]]), None),
                                  [[[[0.0, 0.0], [5.0, 0.0]]]])


def test_flatten_round_trip():
    f = Flatten()
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    out = f.forward(x, EXACT)
    assert out.shape == (32, 3)
    np.testing.assert_array_equal(f.backward(out, None), x)


def test_softmax_xent_examples_and_gradient():
    loss, _ = softmax_xent(np.zeros((7, 3)), [0, 1, 2])
    assert loss == pytest.approx(np.log(7))
    big = np.full((3, 2), -1e4)
    big[[1, 2], [0, 1]] = 1e4
    assert softmax_xent(big, [1, 2])[0] < 1e-12
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(4, 3)), np.array([3, 0, 1])
    _, g = softmax_xent(z, y)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num = (softmax_xent(zp, y)[0] - softmax_xent(zm, y)[0]) / (2 * h)
        assert abs(num - g[idx]) <= 1e-6
    with pytest.raises(ValueError):
        softmax_xent(z, [0, 1, 4])


def test_build_variants():
    assert [l.W.shape for l in build({"preset": "mlp500"}, 784, 10).weighted] == \
        [(500, 784), (500, 500), (10, 500)]
    assert [l.W.shape for l in build({"hidden": [7]}, 5, 3).weighted] == [(7, 5), (3, 7)]
    net = lenet5()
    assert net.forward(np.zeros((2, 784))).shape == (10, 2)
    with pytest.raises(ValueError):
        build({"bogus": 1}, 5, 3)
    with pytest.raises(ValueError):
        build({"preset": "vgg"}, 5, 3)


def test_state_round_trip_and_seeded_init():
    a, b = mlp([4, 3, 2], seed=9), mlp([4, 3, 2], seed=9)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)
    state = a.get_state()
    a.weighted[0].W += 1.0
    a.set_state(state)
    np.testing.assert_array_equal(a.weighted[0].W, b.weighted[0].W)
    bound = 1 / np.sqrt(4)
    assert np.all(np.abs(a.weighted[0].W) < bound)
