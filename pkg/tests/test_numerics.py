import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infex.errors import ConfigurationError, InputValidationError, NonFiniteError
from infex.numerics import (
    Adam,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    MaxPool2,
    MultiplicativeFusion,
    Param,
    ReLU,
    Sequential,
    Sigmoid,
    bce_loss,
    conv2d,
    deconv2d,
    dense,
    grad_check,
    input_grad_check,
    l2_distance,
    maxpool2,
    mse_loss,
    multiplicative_fusion,
    one_hot,
    relu,
    sigmoid,
)


def naive_conv(x, w, b, stride):
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((f, oh, ow))
    for o in range(f):
        for i in range(oh):
            for j in range(ow):
                acc = float(b[o])
                for ch in range(c):
                    for p in range(kh):
                        for q in range(kw):
                            acc += float(x[ch, i * stride + p, j * stride + q]) * float(w[o, ch, p, q])
                out[o, i, j] = acc
    return out


def naive_deconv(x, w, b, stride):
    cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    out = np.zeros((cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ci in range(cin):
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    for p in range(kh):
                        for q in range(kw):
                            out[co, i * stride + p, j * stride + q] += float(x[ci, i, j]) * float(w[ci, co, p, q])
    return out + np.asarray(b, dtype=np.float64)[:, None, None]


class TestConv:
    def test_zero_input_zero_output(self):
        layer = Conv2d(1, 3, 3, rng=np.random.default_rng(0))
        assert np.all(conv2d(np.zeros((1, 4, 4)), layer) == 0)

    def test_identity_kernel(self):
        layer = Conv2d(1, 1, 1)
        layer.weight.value[...] = 1.0
        x = np.random.default_rng(1).random((1, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(conv2d(x, layer), x)

    def test_matches_nested_loop(self):
        rng = np.random.default_rng(2)
        layer = Conv2d(1, 2, 3, stride=2, rng=rng)
        layer.bias.value[...] = rng.normal(size=2)
        x = rng.normal(size=(1, 8, 8)).astype(np.float32)
        got = conv2d(x, layer)
        assert got.shape == (2, 3, 3)
        np.testing.assert_allclose(got, naive_conv(x, layer.weight.value, layer.bias.value, 2), atol=1e-6, rtol=1e-5)

    def test_multichannel_batch(self):
        rng = np.random.default_rng(3)
        layer = Conv2d(3, 4, (3, 2), stride=2, rng=rng)
        x = rng.normal(size=(2, 3, 9, 7)).astype(np.float32)
        y = layer.forward(x)
        for n in range(2):
            np.testing.assert_allclose(y[n], naive_conv(x[n], layer.weight.value, layer.bias.value, 2), atol=1e-5)

    def test_shape_mismatch(self):
        layer = Conv2d(2, 1, 3)
        with pytest.raises(ConfigurationError, match=r"C=1"):
            layer.forward(np.zeros((1, 1, 5, 5), np.float32))
        with pytest.raises(ConfigurationError):
            layer.forward(np.zeros((1, 2, 2, 2), np.float32))


class TestDeconv:
    def test_matches_nested_loop(self):
        rng = np.random.default_rng(4)
        layer = ConvTranspose2d(2, 3, 4, stride=2, rng=rng)
        layer.bias.value[...] = rng.normal(size=3)
        x = rng.normal(size=(2, 5, 4)).astype(np.float32)
        np.testing.assert_allclose(deconv2d(x, layer), naive_deconv(x, layer.weight.value, layer.bias.value, 2),
                                   atol=1e-6, rtol=1e-5)

    def test_zero_input_gives_bias(self):
        layer = ConvTranspose2d(1, 2, 3, stride=2, rng=np.random.default_rng(0))
        layer.bias.value[...] = [0.25, -1.5]
        y = deconv2d(np.zeros((1, 3, 3)), layer)
        assert y.shape == (2, 7, 7)
        assert np.all(y[0] == 0.25) and np.all(y[1] == -1.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        k, s = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        conv = Conv2d(3, 2, k, stride=s, rng=rng)
        deconv = ConvTranspose2d(2, 3, k, stride=s)
        deconv.weight.value[...] = conv.weight.value
        h = int(rng.integers(1, 6))
        size = (h - 1) * s + k
        y = rng.normal(size=(1, 3, size, size)).astype(np.float32)
        x = rng.normal(size=(1, 2, h, h)).astype(np.float32)
        lhs = float(np.sum(conv.forward(y).astype(np.float64) * x))
        rhs = float(np.sum(y.astype(np.float64) * deconv.forward(x)))
        assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs), abs(rhs))

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            ConvTranspose2d(2, 1, 3).forward(np.zeros((1, 3, 2, 2), np.float32))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu([-1, 0, 2]), [0, 0, 2])

    def test_sigmoid_zero(self):
        assert float(sigmoid(0.0)) == 0.5

    def test_sigmoid_open_interval(self):
        y = sigmoid(np.array([-1e4, -100, 100, 1e4]))
        assert np.all(y > 0) and np.all(y < 1)

    def test_maxpool(self):
        np.testing.assert_array_equal(maxpool2([[1, 2], [3, 4]]), [[4]])

    def test_maxpool_odd_dims(self):
        with pytest.raises(ConfigurationError):
            maxpool2(np.zeros((3, 4)))

    def test_maxpool_tie_routes_to_first(self):
        pool = MaxPool2()
        pool.forward(np.ones((1, 1, 2, 2), np.float32))
        g = pool.backward(np.ones((1, 1, 1, 1), np.float32))
        np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


class TestDense:
    def test_identity(self):
        layer = Dense(3, 3)
        layer.weight.value[...] = np.eye(3)
        np.testing.assert_array_equal(dense(np.array([1.0, -2.0, 3.0]), layer), [1, -2, 3])

    def test_bias_only(self):
        layer = Dense(4, 2)
        layer.bias.value[...] = [0.5, 7.0]
        np.testing.assert_array_equal(dense(np.ones(4), layer), [0.5, 7.0])

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(5)
        layer = Dense(6, 4, rng=rng)
        layer.bias.value[...] = rng.normal(size=4)
        x = rng.normal(size=6).astype(np.float32)
        want = [sum(float(layer.weight.value[i, j]) * float(x[j]) for j in range(6)) + float(layer.bias.value[i])
                for i in range(4)]
        np.testing.assert_allclose(dense(x, layer), want, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            dense(np.ones(5), Dense(4, 2))


class TestFusion:
    def test_identity_factor(self):
        fusion = MultiplicativeFusion(2, 2, 2)
        fusion.state_proj.weight.value[...] = np.eye(2)
        fusion.action_proj.weight.value[...] = 1.0
        h = np.array([0.3, -2.0], np.float32)
        np.testing.assert_array_equal(multiplicative_fusion(h, one_hot([1], 2), fusion), h)

    def test_annihilator(self):
        fusion = MultiplicativeFusion(2, 2, 3, rng=np.random.default_rng(0))
        fusion.action_proj.weight.value[:, 0] = 0.0
        out = multiplicative_fusion(np.array([1.0, 2.0], np.float32), one_hot([0], 2), fusion)
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_matches_hand_arithmetic(self):
        rng = np.random.default_rng(6)
        fusion = MultiplicativeFusion(2, 2, 3, rng=rng)
        ws, wa = fusion.state_proj.weight.value, fusion.action_proj.weight.value
        h = rng.normal(size=2).astype(np.float32)
        want = [(float(ws[i, 0]) * float(h[0]) + float(ws[i, 1]) * float(h[1])) * float(wa[i, 1]) for i in range(3)]
        np.testing.assert_allclose(multiplicative_fusion(h, one_hot([1], 2), fusion), want, atol=1e-6)

    @pytest.mark.parametrize("bad", [[0.0, 0.0], [1.0, 1.0], [0.5, 0.5], [2.0, 0.0]])
    def test_rejects_non_one_hot(self, bad):
        fusion = MultiplicativeFusion(2, 2, 3, rng=np.random.default_rng(0))
        with pytest.raises(InputValidationError):
            multiplicative_fusion(np.ones(2, np.float32), np.array(bad), fusion)


class TestLosses:
    def test_bce_perfect(self):
        loss, grad = bce_loss(np.ones((4, 4)), np.ones((4, 4)))
        assert 0 <= loss <= -math.log(1 - 1e-7) * 1.01
        assert np.all(np.isfinite(grad))

    def test_bce_half(self):
        loss, _ = bce_loss(np.full((3, 3), 0.5), np.full((3, 3), 0.5))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_matches_loop(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0.01, 0.99, size=(4, 4)).astype(np.float32)
        t = rng.random((4, 4)).astype(np.float32)
        want = -sum(float(t[i, j]) * math.log(float(p[i, j])) + (1 - float(t[i, j])) * math.log(1 - float(p[i, j]))
                    for i in range(4) for j in range(4)) / 16
        assert bce_loss(p, t)[0] == pytest.approx(want, abs=1e-7)

    def test_bce_zero_pred_is_finite(self):
        loss, grad = bce_loss(np.zeros((2, 2)), np.ones((2, 2)))
        assert math.isfinite(loss) and np.all(np.isfinite(grad))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4))
    def test_bce_minimised_at_target(self, t, p):
        t = np.array(t)
        p = np.array(p)
        at_min = bce_loss(np.clip(t, 1e-7, 1 - 1e-7), t)[0]
        assert bce_loss(p, t)[0] >= at_min - 1e-12 >= -1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            bce_loss(np.zeros(3), np.zeros(4))
        with pytest.raises(ConfigurationError):
            mse_loss(np.zeros(3), np.zeros(4))
        with pytest.raises(ConfigurationError):
            l2_distance(np.zeros(3), np.zeros(4))

    def test_identical_zero(self):
        x = np.random.default_rng(0).random(5)
        assert mse_loss(x, x)[0] == 0 and l2_distance(x, x)[0] == 0

    def test_three_four_five(self):
        assert l2_distance(np.array([3.0, 4.0]), np.zeros(2))[0] == 5.0

    def test_mse_and_l2_match_loop(self):
        rng = np.random.default_rng(8)
        u, v = rng.normal(size=7), rng.normal(size=7)
        assert mse_loss(u, v)[0] == pytest.approx(sum((a - b) ** 2 for a, b in zip(u, v)) / 7, abs=1e-7)
        assert l2_distance(u, v)[0] == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v))), abs=1e-7)


def scalar_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


class TestAdam:
    def test_zero_gradient_noop(self):
        p = Param(np.array([1.0, -2.0]))
        opt = Adam([("p", p)])
        for _ in range(3):
            opt.step()
        np.testing.assert_array_equal(p.value, [1.0, -2.0])
        assert opt.t == 3

    def test_first_step_magnitude(self):
        p = Param(np.zeros(1))
        opt = Adam([("p", p)], lr=1e-3, eps=1e-8)
        p.grad[...] = 0.5
        opt.step()
        # bias-corrected first step is lr * g / (|g| + eps)
        assert abs(p.value[0]) == pytest.approx(1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-6)

    def test_two_steps_match_scalar_trace(self):
        p = Param(np.array([0.3]))
        opt = Adam([("p", p)])
        for g in (0.5, 0.5):
            p.grad[...] = g
            opt.step()
        assert p.value[0] == pytest.approx(scalar_adam([0.5, 0.5], x=0.3), abs=1e-7)

    def test_grad_scale_applied_before_moments(self):
        p = Param(np.array([0.0]))
        opt = Adam([("p", p)], grad_scale=1e-2, eps=1e-3)
        for g in (2.0, -1.0, 0.5):
            p.grad[...] = g
            opt.step()
        assert p.value[0] == pytest.approx(scalar_adam([0.02, -0.01, 0.005], eps=1e-3), abs=1e-7)

    def test_nonfinite_aborts(self):
        p = Param(np.zeros(2))
        p.grad[...] = [1.0, np.nan]
        with pytest.raises(NonFiniteError, match="'w'"):
            Adam([("w", p)]).step()
        np.testing.assert_array_equal(p.value, [0, 0])


def projected_loss(net, x, r):
    def run():
        for _, p in net.params():
            p.zero_grad()
        y = net.forward(x)
        net.backward(r.astype(np.float32))
        return float(np.sum(y.astype(np.float64) * r))
    return run


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["dense", "conv", "deconv", "relu_pool", "sigmoid"])
def test_layer_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "dense":
        net, shape = Sequential(Dense(5, 3, rng=rng)), (2, 5)
    elif kind == "conv":
        net, shape = Sequential(Conv2d(2, 3, 3, stride=2, rng=rng)), (2, 2, 7, 7)
    elif kind == "deconv":
        net, shape = Sequential(ConvTranspose2d(2, 3, 4, stride=2, rng=rng)), (2, 2, 3, 3)
    elif kind == "relu_pool":
        net, shape = Sequential(Conv2d(1, 2, 3, rng=rng), ReLU(), MaxPool2()), (2, 1, 6, 6)
    else:
        net, shape = Sequential(Dense(4, 4, rng=rng), Sigmoid(), Dense(4, 4, rng=rng), Sigmoid(), Dense(4, 2, rng=rng)), (3, 4)
    for _, p in net.params():
        p.value += rng.normal(0, 0.1, size=p.shape).astype(np.float32)
    x = rng.normal(size=shape).astype(np.float32)
    r = rng.normal(size=net.forward(x).shape)
    assert grad_check(projected_loss(net, x, r), net.params(), rng=rng) < 5e-3

    def fwd(xx):
        return float(np.sum(net.forward(xx).astype(np.float64) * r))

    assert input_grad_check(fwd, lambda: net.backward(r.astype(np.float32)), x, rng=rng) < 5e-3


@pytest.mark.parametrize("seed", range(10))
def test_fusion_gradient(seed):
    rng = np.random.default_rng(seed)
    fusion = MultiplicativeFusion(3, 2, 4, rng=rng)
    h = rng.normal(size=(2, 3)).astype(np.float32)
    a = one_hot([0, 1], 2)
    r = rng.normal(size=(2, 4))

    def run():
        for _, p in fusion.params():
            p.zero_grad()
        y = fusion.forward(h, a)
        fusion.backward(r.astype(np.float32))
        return float(np.sum(y.astype(np.float64) * r))

    assert grad_check(run, fusion.params(), rng=rng) < 5e-3


def test_grad_check_detects_wrong_gradient():
    rng = np.random.default_rng(0)
    net = Sequential(Conv2d(1, 2, 3, rng=rng), Sigmoid())
    x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    r = rng.normal(size=(1, 2, 3, 3))
    good = projected_loss(net, x, r)
    assert grad_check(good, net.params()) < 5e-3

    def broken():
        loss = good()
        net.layers[0].weight.grad *= 1.02
        return loss

    assert grad_check(broken, net.params()) > 1e-2


def test_linear_layer_check_is_tight():
    rng = np.random.default_rng(1)
    net = Sequential(Dense(6, 3, rng=rng))
    x = rng.normal(size=(4, 6)).astype(np.float32)
    assert grad_check(projected_loss(net, x, rng.normal(size=(4, 3))), net.params()) < 1e-3


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    net = Sequential(Conv2d(1, 4, 3, rng=rng), ReLU(), MaxPool2(), Flatten(), Dense(36, 2, rng=rng))
    x = rng.random((3, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x), net.forward(x.copy()))
