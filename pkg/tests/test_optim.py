"""Adam update rule against a hand-rolled float64 reference."""

import numpy as np
import pytest

from resmap.optim import AdamState, adam_step


def reference_adam(params, grad_fn, lr, betas, eps, steps):
    """Textbook Adam with bias correction, float64."""
    b1, b2 = betas
    p = {k: v.astype(np.float64) for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(val) for k, val in p.items()}
    for t in range(1, steps + 1):
        grads = grad_fn(p)
        for key in p:
            g = grads[key].astype(np.float64)
            m[key] = b1 * m[key] + (1 - b1) * g
            v[key] = b2 * v[key] + (1 - b2) * g * g
            mhat = m[key] / (1 - b1 ** t)
            vhat = v[key] / (1 - b2 ** t)
            p[key] = p[key] - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_two_steps_match_reference():
    g = np.random.default_rng(0)
    w0 = g.standard_normal((3, 4)).astype(np.float32)
    b0 = g.standard_normal(4).astype(np.float32)
    grad_w = g.standard_normal((3, 4)).astype(np.float32)
    grad_b = g.standard_normal(4).astype(np.float32)

    params = {"w": w0.copy(), "b": b0.copy()}
    state = AdamState(lr=1e-2)
    for _ in range(2):
        adam_step(params, {"w": grad_w, "b": grad_b}, state)

    want = reference_adam(
        {"w": w0, "b": b0},
        lambda p: {"w": grad_w, "b": grad_b},
        lr=1e-2, betas=(0.9, 0.999), eps=state.eps, steps=2,
    )
    np.testing.assert_allclose(params["w"], want["w"], rtol=2e-5, atol=2e-6)
    np.testing.assert_allclose(params["b"], want["b"], rtol=2e-5, atol=2e-6)


def test_first_step_bias_correction():
    # after one step with constant gradient, update is exactly -lr * g/(|g|+eps)
    params = {"w": np.zeros(3, dtype=np.float32)}
    grad = np.array([0.5, -2.0, 1e-4], dtype=np.float32)
    state = AdamState(lr=0.1)
    adam_step(params, {"w": grad}, state)
    want = -0.1 * grad / (np.abs(grad) + state.eps)
    np.testing.assert_allclose(params["w"], want, rtol=1e-5, atol=1e-7)


def test_zero_lr_is_identity():
    params = {"w": np.array([1.0, 2.0], dtype=np.float32)}
    before = params["w"].copy()
    state = AdamState(lr=0.0)
    adam_step(params, {"w": np.array([5.0, -5.0], dtype=np.float32)}, state)
    np.testing.assert_array_equal(params["w"], before)


def test_step_counter_advances():
    params = {"w": np.zeros(2, dtype=np.float32)}
    state = AdamState(lr=1e-3)
    assert state.step == 0
    adam_step(params, {"w": np.ones(2, dtype=np.float32)}, state)
    adam_step(params, {"w": np.ones(2, dtype=np.float32)}, state)
    assert state.step == 2


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ValueError):
        AdamState(lr=-1e-3)
    with pytest.raises(ValueError):
        AdamState(lr=1e-3, beta1=1.0)
    with pytest.raises(ValueError):
        AdamState(lr=1e-3, beta2=-0.1)


def test_update_is_scale_free():
    # Adam normalizes by the gradient magnitude: scaling all gradients by
    # 1000 must leave the first-step update nearly unchanged
    p1 = {"w": np.zeros(3, dtype=np.float32)}
    p2 = {"w": np.zeros(3, dtype=np.float32)}
    g = np.array([0.3, -0.7, 0.05], dtype=np.float32)
    adam_step(p1, {"w": g}, AdamState(lr=0.01))
    adam_step(p2, {"w": g * 1000}, AdamState(lr=0.01))
    np.testing.assert_allclose(p1["w"], p2["w"], rtol=1e-3, atol=1e-7)
