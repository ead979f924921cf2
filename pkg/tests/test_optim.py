"""AdamW semantics: descent, decoupled decay, convergence, clipping."""

import numpy as np
import pytest

from flowstyle import tensor as T
from flowstyle.optim import AdamW, AdamWState, adamw_step, clip_global_norm, global_grad_norm


def test_single_step_descends_quadratic():
    w = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    with T.Tape() as tape:
        tape.backward(T.mul(w, w))
    opt.step()
    assert w.data[0] < 1.0


def test_zero_grad_pure_decay_shrink():
    w = T.Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.01)
    w.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert w.data[0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.01), rel=1e-6)


def test_500_steps_reaches_quadratic_minimum():
    w = T.Tensor(np.array([1.5, -2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        with T.Tape() as tape:
            tape.backward(T.tsum(T.mul(w, w)))
        opt.step()
        opt.zero_grad()
    assert np.abs(w.data).max() < 1e-3


def test_moments_bias_correction_first_step():
    # after one step with constant gradient g, update is lr * g/|g| = lr * sign
    w = T.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    w.grad = np.array([0.25], dtype=np.float32)
    state = AdamWState({"w": w}, weight_decay=0.0)
    adamw_step({"w": w}, state, lr=0.01)
    assert w.data[0] == pytest.approx(-0.01, rel=1e-4)


def test_shape_mismatch_rejected():
    w = T.Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    w.grad = np.zeros(4, dtype=np.float32)
    state = AdamWState({"w": w})
    with pytest.raises(ValueError, match="shape"):
        adamw_step({"w": w}, state, lr=0.1)


def test_nonpositive_lr_rejected():
    w = T.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    state = AdamWState({"w": w})
    with pytest.raises(ValueError, match="positive"):
        adamw_step({"w": w}, state, lr=0.0)


def test_step_counter_increases():
    w = T.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1)
    for expected in (1, 2, 3):
        opt.step()
        assert opt.state.step_count == expected


def test_clip_global_norm():
    a = T.Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    b = T.Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
    a.grad = np.full(3, 2.0, dtype=np.float32)
    b.grad = np.full(4, 2.0, dtype=np.float32)
    params = {"a": a, "b": b}
    before = global_grad_norm(params)
    returned = clip_global_norm(params, 1.0)
    assert returned == pytest.approx(before)
    assert global_grad_norm(params) == pytest.approx(1.0, rel=1e-5)


def test_clip_leaves_small_gradients_alone():
    a = T.Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    a.grad = np.array([0.1, 0.1], dtype=np.float32)
    clip_global_norm({"a": a}, 1.0)
    np.testing.assert_allclose(a.grad, [0.1, 0.1])
