import numpy as np
import pytest

from modmoe import numerics as nx
from modmoe.numerics import AdamState, AdamW, NonFiniteGradient, Tensor, adamw_step, clip_grad_norm


def _param(values, grad):
    p = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name="w", dtype=np.float64)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_clip_halves_when_norm_is_twice_max():
    a, b = _param([3.0, 0.0], [3.0, 0.0]), _param([0.0], [4.0])   # norm 5
    norm, s = clip_grad_norm([a, b], 2.5)
    assert norm == pytest.approx(5.0)
    assert s == pytest.approx(0.5)
    np.testing.assert_allclose(a.grad, [1.5, 0.0])
    np.testing.assert_allclose(b.grad, [2.0])


def test_clip_leaves_small_gradients_untouched():
    a = _param([1.0], [0.3])
    before = a.grad.copy()
    assert clip_grad_norm([a], 1.0)[1] == 1.0
    np.testing.assert_array_equal(a.grad, before)


def test_nonfinite_gradient_names_parameter():
    a = _param([1.0], [np.nan])
    with pytest.raises(NonFiniteGradient, match="w"):
        clip_grad_norm([a], 1.0)
    with pytest.raises(NonFiniteGradient, match="w"):
        adamw_step(a, a.grad, AdamState(np.zeros(1), np.zeros(1)), 1e-3)


def test_first_adamw_step_on_quadratic_matches_closed_form():
    # f(p) = p^2 at p = 1.5, so g = 3. After one step the bias-corrected moments are g and g^2.
    lr, wd, eps = 0.1, 0.01, 1e-8
    p = _param([1.5], [3.0])
    adamw_step(p, p.grad, AdamState(np.zeros(1), np.zeros(1)), lr, (0.9, 0.95), eps, wd)
    expected = 1.5 * (1 - lr * wd) - lr * 3.0 / (3.0 + eps)
    assert p.data[0] == pytest.approx(expected, rel=1e-15)


def test_second_step_uses_running_moments():
    lr, b1, b2 = 0.05, 0.9, 0.95
    p = _param([1.0], [2.0])
    st = AdamState(np.zeros(1), np.zeros(1))
    adamw_step(p, np.array([2.0]), st, lr, (b1, b2), 0.0, 0.0)
    adamw_step(p, np.array([-1.0]), st, lr, (b1, b2), 0.0, 0.0)
    m = (1 - b1) * (b1 * 2.0 + -1.0)
    v = (1 - b2) * (b2 * 4.0 + 1.0)
    mhat, vhat = m / (1 - b1 ** 2), v / (1 - b2 ** 2)
    assert p.data[0] == pytest.approx(1.0 - lr - lr * mhat / np.sqrt(vhat), rel=1e-12)


def test_adamw_defaults():
    opt = AdamW([])
    assert (opt.lr, opt.betas, opt.weight_decay) == (3e-4, (0.9, 0.95), 0.1)


def test_adamw_skips_parameters_without_grad_and_decays_only_matrices():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    idle = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = AdamW([w, b, idle], lr=0.1, weight_decay=0.5)
    w.grad = np.zeros((2, 2), dtype=np.float32)
    b.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(w.data, 0.95)        # decay only: grad is zero
    np.testing.assert_array_equal(b.data, 1.0)      # vectors are not decayed
    np.testing.assert_array_equal(idle.data, 1.0)   # no grad, untouched
    opt.zero_grad()
    assert w.grad is None


def test_training_reduces_quadratic():
    p = Tensor(np.array([[2.0, -3.0]]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    for _ in range(200):
        p.grad = None
        nx.backward(nx.sum_all(nx.mul(p, p)))
        opt.step()
    assert np.abs(p.data).max() < 0.1
