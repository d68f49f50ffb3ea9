import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topomix.numerics import (Adam, ParameterStore, TrainingFault, affine, affine_backward,
                              clip_global_norm, elu, elu_grad, global_norm, gru_cell,
                              gru_cell_backward, gru_init, make_rng, xavier_init)


def test_affine_identity_and_hand_case():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(affine(x, np.eye(2), np.zeros(2)), x)
    W = np.array([[1.0, 1.0], [0.0, 1.0]])
    np.testing.assert_array_equal(affine(x, W, np.array([0.0, 1.0])), [3.0, 3.0])


def test_affine_backward_quadratic():
    x = np.array([[1.0, 2.0]])
    y = affine(x, np.eye(2), np.zeros(2))
    dx, dW, db = affine_backward(2 * y, x, np.eye(2))
    np.testing.assert_array_equal(dx, [[2.0, 4.0]])
    np.testing.assert_array_equal(db, [2.0, 4.0])
    np.testing.assert_array_equal(dW, [[2.0, 4.0], [4.0, 8.0]])


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        affine(np.ones(3), np.eye(2), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(1, 4), n_in=st.integers(1, 5),
       n_out=st.integers(1, 5))
def test_affine_backward_matches_finite_differences(seed, rows, n_in, n_out):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, n_in))
    W = rng.normal(size=(n_out, n_in))
    b = rng.normal(size=n_out)
    c = rng.normal(size=(rows, n_out))   # loss = sum(c * y)
    dx, dW, db = affine_backward(c, x, W)
    h = 1e-6
    for arr, grad in ((x, dx), (W, dW), (b, db)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = np.sum(c * affine(x, W, b))
            arr[idx] = old - h
            lm = np.sum(c * affine(x, W, b))
            arr[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-8)


def test_elu_values():
    assert elu(np.array(0.0)) == 0.0
    assert elu(np.array(2.0)) == 2.0
    assert elu(np.array(-1.0)) == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert elu(np.array(-1.0)) == pytest.approx(-0.6321, abs=1e-4)


def test_elu_derivative_positive_far_left():
    g = float(elu_grad(np.array(-50.0)))
    assert g > 0
    assert g == pytest.approx(math.exp(-50), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30, allow_nan=False))
def test_elu_grad_matches_difference_quotient(x):
    if abs(x) < 1e-4:
        return  # kink at zero
    h = 1e-6
    num = (elu(np.array(x + h)) - elu(np.array(x - h))) / (2 * h)
    assert float(elu_grad(np.array(x))) == pytest.approx(float(num), rel=1e-6, abs=1e-9)


def _gru(in_dim=3, hidden=4, seed=0, scale=None):
    store = ParameterStore()
    gru_init(store, "g_", in_dim, hidden, make_rng(seed))
    if scale is not None:
        store.set_flat(np.random.default_rng(seed).normal(scale=scale, size=store.size))
    return store


def test_gru_zero_params_zero_state():
    store = _gru()
    store.set_flat(np.zeros(store.size))
    x = np.array([0.3, -1.0, 2.0])
    h_new, (_, _, r, z, n, _) = gru_cell(store, "g_", x, np.zeros(4))
    np.testing.assert_array_equal(r, 0.5)
    np.testing.assert_array_equal(z, 0.5)
    np.testing.assert_array_equal(n, 0.0)
    np.testing.assert_array_equal(h_new, 0.0)


def test_gru_saturated_update_gate_carries_state():
    store = _gru(scale=0.1)
    H = 4
    store["g_b"][H:2 * H] = 50.0
    h = np.array([0.2, -0.7, 0.9, 0.0])
    h_new, _ = gru_cell(store, "g_", np.ones(3), h)
    np.testing.assert_allclose(h_new, h, atol=1e-12)


def test_gru_shape_mismatch():
    with pytest.raises(ValueError):
        gru_cell(_gru(), "g_", np.ones(5), np.zeros(4))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gru_backward_matches_finite_differences(seed):
    store = _gru(in_dim=3, hidden=4, seed=seed, scale=0.5)
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(2, 3))
    h = rng.normal(size=(2, 4))
    c = rng.normal(size=(2, 4))

    def loss():
        return float(np.sum(c * gru_cell(store, "g_", x, h, keep_cache=False)[0]))

    grads = store.zeros_like()
    _, cache = gru_cell(store, "g_", x, h)
    dx, dh = gru_cell_backward(store, "g_", cache, c, grads)
    eps = 1e-5
    targets = [(x, dx), (h, dh)] + [(store[k], grads[k]) for k in store.names()]
    worst = 0.0
    for arr, grad in targets:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss()
            arr[idx] = old - eps
            lm = loss()
            arr[idx] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(grad[idx] - num) / max(abs(grad[idx]), abs(num), 1e-8))
    assert worst <= 1e-6


def test_clip_examples():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_global_norm(g, 10.0) == 5.0
    np.testing.assert_array_equal(g["a"], [3.0, 4.0])
    g = {"a": np.array([30.0, 40.0])}
    assert clip_global_norm(g, 10.0) == 50.0
    np.testing.assert_allclose(g["a"], [6.0, 8.0], rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
def test_clip_bounds_norm_and_never_grows(seed, scale):
    rng = np.random.default_rng(seed)
    g = {"a": rng.normal(size=7) * scale, "b": rng.normal(size=(2, 3)) * scale}
    before = {k: np.abs(v).copy() for k, v in g.items()}
    clip_global_norm(g, 10.0)
    assert global_norm(g) <= 10.0 + 1e-9
    for k in g:
        assert np.all(np.abs(g[k]) <= before[k] + 1e-12)


def test_xavier_bound_and_determinism():
    w = xavier_init((128, 128), make_rng(3))
    assert np.abs(w).max() <= math.sqrt(6 / 256)
    assert math.sqrt(6 / 256) == pytest.approx(0.1531, abs=1e-4)
    np.testing.assert_array_equal(w, xavier_init((128, 128), make_rng(3)))


def test_gru_biases_start_at_zero():
    store = _gru()
    assert not store["g_b"].any() and not store["g_b_nh"].any()


def _store():
    s = ParameterStore()
    s.add("w", np.array([1.0, -2.0, 0.5]))
    return s


def test_adam_zero_gradient_is_noop():
    s = _store()
    opt = Adam(s, lr=5e-4)
    opt.step(s, {"w": np.zeros(3)})
    np.testing.assert_array_equal(s["w"], [1.0, -2.0, 0.5])
    assert opt.t == 1


def test_adam_first_step_formula():
    s = _store()
    g = np.array([0.2, -3.0, 1e-9])
    lr, eps = 5e-4, 1e-8
    Adam(s, lr=lr, eps=eps).step(s, {"w": g.copy()})
    # t=1: m_hat = g, v_hat = g^2
    expected = np.array([1.0, -2.0, 0.5]) - lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(s["w"], expected, rtol=0, atol=1e-15)


def test_adam_refuses_non_finite():
    s = _store()
    opt = Adam(s)
    with pytest.raises(TrainingFault):
        opt.step(s, {"w": np.array([1.0, np.nan, 0.0])})
    np.testing.assert_array_equal(s["w"], [1.0, -2.0, 0.5])
    assert opt.t == 0


def test_adam_deterministic_over_100_steps():
    out = []
    for _ in range(2):
        s = _store()
        opt = Adam(s)
        rng = make_rng(11)
        for _ in range(100):
            opt.step(s, {"w": rng.normal(size=3)})
        out.append(s["w"].copy())
    assert out[0].tobytes() == out[1].tobytes()


def test_rng_stream_reproducible():
    assert make_rng(5).random(4).tobytes() == make_rng(5).random(4).tobytes()
    assert make_rng(5).random() != make_rng(6).random()
