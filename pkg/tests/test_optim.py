"""Closed-form checks for SGD, Adam, and the cosine schedule."""

import math

import numpy as np
import pytest

from forgenas.autodiff import Tensor
from forgenas.optim import SGD, Adam, cosine_lr, zero_grads


def test_sgd_momentum_closed_form():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.025, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert np.allclose(p.data, 0.975)  # buf = 1, p -= lr*buf
    p.grad = np.array([1.0])
    opt.step()
    # buf = 0.9*1 + 1 = 1.9; p = 0.975 - 0.025*1.9
    assert np.allclose(p.data, 0.975 - 0.0475)


def test_sgd_weight_decay_enters_gradient():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    assert np.allclose(p.data, 2.0 - 0.1 * (0.0 + 0.5 * 2.0))


def test_adam_first_step_closed_form():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    p.grad = np.array([0.5])
    opt.step()
    # bias-corrected m_hat = g, v_hat = g^2 -> step = lr * g/(|g|+eps)
    want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)
    assert abs(float(p.data[0]) - want) < 1e-12


def test_adam_zero_gradient_leaves_parameter_unchanged():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    p.grad = np.array([0.0])
    opt.step()
    assert np.allclose(p.data, 3.0)


@pytest.mark.parametrize("cls,kwargs", [(SGD, {"lr": 0.1}),
                                        (Adam, {"lr": 0.1})])
def test_missing_gradient_raises_unless_allowed(cls, kwargs):
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = cls([p], **kwargs)
    with pytest.raises(RuntimeError):
        opt.step()
    q = Tensor(np.array([1.0]), requires_grad=True)
    opt2 = cls([q], allow_missing=True, **kwargs)
    opt2.step()  # no-op, no error
    assert np.allclose(q.data, 1.0)


def test_step_zeroes_gradients():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert p.grad is None


def test_state_roundtrip_resumes_identically():
    rng = np.random.default_rng(0)
    for cls in (SGD, Adam):
        p1 = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt1 = cls([p1], lr=0.05)
        for _ in range(3):
            p1.grad = rng.standard_normal(2)
            opt1.step()
        saved_state = opt1.state()
        saved_data = p1.data.copy()
        g_next = rng.standard_normal(2)

        p1.grad = g_next.copy()
        opt1.step()

        p2 = Tensor(saved_data.copy(), requires_grad=True)
        opt2 = cls([p2], lr=0.05)
        opt2.load_state(saved_state)
        p2.grad = g_next.copy()
        opt2.step()
        assert np.array_equal(p1.data, p2.data)


def test_zero_grads():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.ones(2)
    zero_grads([p])
    assert p.grad is None


def test_cosine_lr_schedule():
    assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0, abs=1e-15)
    mid = [cosine_lr(0.1, e, 10) for e in range(11)]
    assert all(a >= b for a, b in zip(mid, mid[1:]))  # monotone decay
    assert cosine_lr(0.1, 0, 1) == 0.1


def test_adam_matches_reference_sequence():
    # independent reference implementation of the update rule
    p = Tensor(np.array([0.7, -1.3]), requires_grad=True)
    opt = Adam([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    ref = p.data.copy()
    m = np.zeros(2)
    v = np.zeros(2)
    rng = np.random.default_rng(42)
    for t in range(1, 6):
        g = rng.standard_normal(2)
        p.grad = g.copy()
        opt.step()
        g = g + 0.1 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        ref = ref - 0.01 * mh / (np.sqrt(vh) + 1e-8)
        assert np.abs(p.data - ref).max() < 1e-12
