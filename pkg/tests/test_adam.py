"""Adam update against hand-evaluated formulas."""

import numpy as np
import pytest

from diffad.optim import adam_step, init_adam


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.zeros(3)}
    state = init_adam(params, lr=1e-3)
    new_params, new_state = adam_step(params, grads, state)
    assert np.array_equal(new_params["w"], params["w"])
    assert new_state.step == 1


def test_single_scalar_first_step_moves_by_lr():
    # g=1 fresh state: m_hat = v_hat = 1, so the step is lr/(1+eps)
    params = {"w": np.array(0.5)}
    grads = {"w": np.array(1.0)}
    state = init_adam(params, lr=1e-3)
    new_params, _ = adam_step(params, grads, state)
    assert new_params["w"] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_hand_evaluated_second_step():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    params = {"w": np.array(1.0)}
    state = init_adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
    g1, g2 = 0.5, -0.25

    p, s = adam_step(params, {"w": np.array(g1)}, state)
    p, s = adam_step(p, {"w": np.array(g2)}, s)

    m1 = (1 - b1) * g1
    v1 = (1 - b2) * g1 * g1
    w1 = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g2
    v2 = b2 * v1 + (1 - b2) * g2 * g2
    w2 = w1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert p["w"] == pytest.approx(w2, abs=1e-14)
    assert s.step == 2


def test_determinism_bit_identical():
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(3,))}
    grads = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(3,))}
    state = init_adam(params, lr=2e-3)
    p1, s1 = adam_step(params, grads, state)
    p2, s2 = adam_step(params, grads, state)
    for k in params:
        assert np.array_equal(p1[k], p2[k])
        assert np.array_equal(s1.m[k], s2.m[k])
        assert np.array_equal(s1.v[k], s2.v[k])


def test_inputs_not_mutated():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.1, -0.2])}
    state = init_adam(params)
    p0, g0, m0 = params["w"].copy(), grads["w"].copy(), state.m["w"].copy()
    adam_step(params, grads, state)
    assert np.array_equal(params["w"], p0)
    assert np.array_equal(grads["w"], g0)
    assert np.array_equal(state.m["w"], m0)
    assert state.step == 0


def test_shape_mismatch_rejected():
    params = {"w": np.zeros((2, 2))}
    grads = {"w": np.zeros(3)}
    state = init_adam(params)
    with pytest.raises(ValueError):
        adam_step(params, grads, state)
