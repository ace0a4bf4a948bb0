"""Gradient and semantics checks for the tensor/autodiff core."""

import numpy as np
import pytest

from forgenas import autodiff as ad
from forgenas.autodiff import Tensor, no_grad, using_dtype

from conftest import fd_gradients, rel_err


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def naive_conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Direct nested-loop cross-correlation used as an oracle."""
    n, c, h, w_in = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w_in + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            grp = oc // (o // groups)
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ic in range(cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[oc, ic, ky, kx] * xp[
                                    b, grp * cg + ic,
                                    y * stride + ky * dilation,
                                    xx * stride + kx * dilation]
                    out[b, oc, y, xx] = acc
    return out


# -- elementwise ops ---------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 4)
    y = _t(rng, 3, 4)
    proj = rng.standard_normal((3, 4))

    def loss():
        z = (x * y + x - y) / (y * y + 3.0)
        z = z.relu() + (x * 0.1).exp() + (x * x + 1.0).log()
        return (z * Tensor(proj)).sum()

    assert fd_gradients(loss, [x, y], rng=rng) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_matmul_broadcast_sum_mean_gradients(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 4, 3)
    b = _t(rng, 3, 5)
    c = _t(rng, 1, 5)

    def loss():
        z = (a @ b) + c  # broadcast add over rows
        return (z.mean(axis=0) * z.sum(axis=0, keepdims=False)).sum()

    assert fd_gradients(loss, [a, b, c], rng=rng) < 1e-6


def test_getitem_reshape_pow_gradients():
    rng = np.random.default_rng(7)
    x = _t(rng, 2, 3, 4)

    def loss():
        z = x.reshape(6, 4)[1:4].pow(2.0)
        return z.sum()

    assert fd_gradients(loss, [x], rng=rng) < 1e-6


def test_scalar_coercion_and_operators():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    y = 2.0 * x + 1.0 - x / 2.0
    assert np.allclose(y.data, [2.5, -2.0, 5.5])
    y = (1.0 - x).relu()
    assert np.allclose(y.data, [0.0, 3.0, 0.0])


# -- convolution against the naive oracle ------------------------------------


@pytest.mark.parametrize("stride,padding,dilation,groups", [
    (1, 0, 1, 1), (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1),
    (1, 1, 1, 2), (2, 2, 2, 4), (1, 1, 1, 4),
])
def test_conv2d_matches_naive(stride, padding, dilation, groups):
    rng = np.random.default_rng(11)
    c_in, c_out = 4, 4
    x = rng.standard_normal((2, c_in, 9, 9))
    w = rng.standard_normal((c_out, c_in // groups, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), stride, padding, dilation, groups)
    want = naive_conv2d(x, w, stride, padding, dilation, groups)
    assert got.data.shape == want.shape
    assert np.abs(got.data - want).max() < 1e-10


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride,padding,dilation,groups", [
    (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 4),
])
def test_conv2d_gradients(seed, stride, padding, dilation, groups):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 4, 8, 8)
    w = _t(rng, 4, 4 // groups, 3, 3)
    proj = None

    def loss():
        out = ad.conv2d(x, w, stride, padding, dilation, groups)
        nonlocal proj
        if proj is None:
            proj = np.random.default_rng(99).standard_normal(out.shape)
        return (out * Tensor(proj)).sum()

    assert fd_gradients(loss, [x, w], rng=rng) < 1e-6


def test_conv2d_shape_errors():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    w = Tensor(rng.standard_normal((4, 4, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv2d(x, w, groups=3)  # 4 not divisible by 3
    with pytest.raises(ValueError):
        ad.conv2d(x, Tensor(rng.standard_normal((4, 2, 3, 3))))
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(rng.standard_normal((1, 4, 2, 2))), w, padding=0,
                  dilation=3)


# -- pooling ------------------------------------------------------------------


def test_max_pool_forward_and_gradient():
    rng = np.random.default_rng(3)
    x = _t(rng, 2, 3, 6, 6)

    def loss():
        out = ad.max_pool2d(x, kernel=3, stride=1, padding=1)
        return (out * out).sum()

    assert fd_gradients(loss, [x], rng=rng) < 1e-5
    data = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = ad.max_pool2d(Tensor(data), kernel=2, stride=2, padding=0)
    assert np.allclose(out.data, [[[[5, 7], [13, 15]]]])


def test_avg_pool_forward_and_gradient():
    rng = np.random.default_rng(4)
    x = _t(rng, 2, 3, 6, 6)

    def loss():
        return (ad.avg_pool2d(x, 2, 2) * 3.0).sum()

    assert fd_gradients(loss, [x], rng=rng) < 1e-6
    data = np.ones((1, 1, 4, 4))
    assert np.allclose(ad.avg_pool2d(Tensor(data), 2, 2).data, 1.0)


# -- composite numerics --------------------------------------------------------


def test_softmax_properties_and_gradient():
    rng = np.random.default_rng(5)
    x = _t(rng, 4, 6)
    sm = ad.softmax(x, axis=1)
    assert np.all(sm.data > 0)
    assert np.allclose(sm.data.sum(axis=1), 1.0)
    # shift invariance
    shifted = ad.softmax(Tensor(x.data + 100.0), axis=1)
    assert np.allclose(sm.data, shifted.data)
    proj = rng.standard_normal((4, 6))

    def loss():
        return (ad.softmax(x, axis=1) * Tensor(proj)).sum()

    assert fd_gradients(loss, [x], rng=rng) < 1e-6


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((3, 5)) * 50.0)
    a = ad.log_softmax(x, axis=1).data
    b = np.log(ad.softmax(x, axis=1).data)
    assert np.abs(a - b).max() < 1e-9


def test_softmax_cross_entropy_value_and_gradient():
    logits = Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])),
                    requires_grad=True)
    labels = np.array([1, 0])
    loss = ad.softmax_cross_entropy(logits, labels)
    want = -(np.log(0.75) + np.log(0.5)) / 2.0
    assert abs(float(loss.data) - want) < 1e-12

    rng = np.random.default_rng(8)
    x = _t(rng, 5, 3)
    y = rng.integers(0, 3, 5)
    assert fd_gradients(lambda: ad.softmax_cross_entropy(x, y),
                        [x], rng=rng) < 1e-6
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(x, np.array([0, 1, 2, 3, 0]))
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(x, np.array([0, 1]))


def test_batch_norm_training_statistics_and_gradient():
    rng = np.random.default_rng(9)
    x = _t(rng, 4, 3, 5, 5)
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal((1, 3, 1, 1)),
                   requires_grad=True)
    beta = Tensor(0.1 * rng.standard_normal((1, 3, 1, 1)),
                  requires_grad=True)
    rm, rv = np.zeros(3), np.ones(3)
    out = ad.batch_norm(x, gamma, beta, rm, rv, training=True)
    xhat = (out.data - beta.data) / gamma.data
    assert np.abs(xhat.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(xhat.var(axis=(0, 2, 3)) - 1.0).max() < 1e-3
    # running stats moved toward the batch stats
    assert np.allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))

    proj = rng.standard_normal(x.shape)

    def loss():
        rm2, rv2 = np.zeros(3), np.ones(3)
        o = ad.batch_norm(x, gamma, beta, rm2, rv2, training=True)
        return (o * Tensor(proj)).sum()

    assert fd_gradients(loss, [x, gamma, beta], rng=rng) < 1e-5


def test_batch_norm_eval_uses_running_stats():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    rm = np.array([1.0, -1.0, 0.5])
    rv = np.array([4.0, 1.0, 0.25])
    out = ad.batch_norm(x, None, None, rm, rv, training=False)
    want = (x.data - rm.reshape(1, 3, 1, 1)) \
        / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5)
    assert np.abs(out.data - want).max() < 1e-12
    # eval mode must not touch the running statistics
    assert np.allclose(rm, [1.0, -1.0, 0.5])


def test_batch_norm_rejects_degenerate_batch():
    x = Tensor(np.zeros((1, 2, 1, 1)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.batch_norm(x, None, None, np.zeros(2), np.ones(2), training=True)


def test_concat_gradient_and_global_avg_pool():
    rng = np.random.default_rng(12)
    a = _t(rng, 2, 3, 4, 4)
    b = _t(rng, 2, 2, 4, 4)
    proj = rng.standard_normal((2, 5, 4, 4))

    def loss():
        return (ad.concat([a, b], axis=1) * Tensor(proj)).sum()

    assert fd_gradients(loss, [a, b], rng=rng) < 1e-6
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    assert np.allclose(ad.global_avg_pool(x).data, [[1.5, 5.5]])


# -- tape mechanics -----------------------------------------------------------


def test_backward_requires_scalar_and_runs_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * x).sum()
    with pytest.raises(ValueError):
        (x * x).backward()
    y.backward()
    assert np.allclose(x.grad, 2.0)
    with pytest.raises(RuntimeError):
        y.backward()


def test_backward_frees_interior_grads_unless_retained():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    mid = x * 3.0
    (mid.sum()).backward()
    assert mid.grad is None and x.grad is not None

    x.grad = None
    mid = x * 3.0
    (mid.sum()).backward(retain_grads=True)
    assert mid.grad is not None and np.allclose(mid.grad, 1.0)


def test_gradient_accumulation_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x  # x used twice
    y.sum().backward()
    assert np.allclose(x.grad, 5.0)


def test_no_grad_suppresses_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad and y._parents == ()


def test_detach_breaks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).detach()
    assert not y.requires_grad


def test_using_dtype_switch_and_restore():
    assert ad.default_dtype() is np.float64
    with using_dtype("float32"):
        t = Tensor(np.ones(3))
        assert t.data.dtype == np.float32
        y = (t * 2.0) + 1.0
        assert y.data.dtype == np.float32
    assert ad.default_dtype() is np.float64
    assert Tensor(np.ones(3, dtype=np.float32)).data.dtype == np.float64
    with pytest.raises(ValueError):
        with using_dtype("int32"):
            pass


def test_float32_graph_stays_float32_through_backward():
    rng = np.random.default_rng(13)
    with using_dtype("float32"):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        out = ad.conv2d(x, w, padding=1)
        assert out.data.dtype == np.float32
        out.sum().backward()
        assert x.grad.dtype == np.float32
        assert w.grad.dtype == np.float32


def test_determinism_same_seed_same_gradients():
    def run():
        rng = np.random.default_rng(21)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        (ad.conv2d(x, w, padding=1).relu().sum()).backward()
        return x.grad.copy(), w.grad.copy()

    (gx1, gw1), (gx2, gw2) = run(), run()
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)
