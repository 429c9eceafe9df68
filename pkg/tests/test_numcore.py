"""Numeric substrate: forward values against independent oracles, backward
passes against central finite differences."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from lqkt import numcore
from lqkt.numcore import (
    Adam,
    AdamState,
    DegenerateMaskError,
    DimensionError,
    Param,
    adam_step,
)

FD_H = 1e-6


def fd_grad(loss_fn, x, h=FD_H):
    """Central-difference gradient of a scalar loss with respect to array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = loss_fn()
        x[idx] = orig - h
        down = loss_fn()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
        it.iternext()
    return g


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    npt.assert_array_equal(numcore.matmul(a, np.eye(2)), a)


def test_matmul_hand_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    npt.assert_array_equal(numcore.matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_against_triple_loop():
    rng = numcore.new_rng(11)
    for _ in range(20):
        n, k, m = rng.integers(1, 17, size=3)
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        want = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                for t in range(k):
                    want[i, j] += a[i, t] * b[t, j]
        npt.assert_allclose(numcore.matmul(a, b), want, atol=1e-12)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        numcore.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_backward_matches_finite_differences():
    rng = numcore.new_rng(3)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    r = rng.standard_normal((4, 5))  # random reduction makes the loss scalar
    loss = lambda: float((numcore.matmul(a, b) * r).sum())
    da, db = numcore.matmul_backward(r, a, b)
    npt.assert_allclose(da, fd_grad(loss, a), atol=1e-6)
    npt.assert_allclose(db, fd_grad(loss, b), atol=1e-6)


def test_matmul_backward_ones_structure():
    # With unit upstream gradient, dA is ones @ B^T: row-independent.
    b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    a = np.zeros((2, 3))
    da, _ = numcore.matmul_backward(np.ones((2, 2)), a, b)
    npt.assert_array_equal(da, np.ones((2, 2)) @ b.T)


# ---------------------------------------------------------------------------
# add / broadcast
# ---------------------------------------------------------------------------


def test_add_shape_check():
    with pytest.raises(DimensionError):
        numcore.add(np.zeros((2, 2)), np.zeros((3, 2)))


def test_broadcast_add_row_values_and_backward():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    r = np.array([[10.0, 20.0]])
    out = numcore.broadcast_add_row(x, r)
    npt.assert_array_equal(out, [[11.0, 22.0], [13.0, 24.0], [15.0, 26.0]])
    g = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    dx, dr = numcore.broadcast_add_row_backward(g)
    npt.assert_array_equal(dx, g)
    npt.assert_array_equal(dr, [[9.0, 12.0]])   # column sums


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_sigmoid_against_exp_formula():
    x = np.array([[-1.0, 0.0, 1.0]])
    want = 1.0 / (1.0 + np.exp(-x))
    npt.assert_allclose(numcore.sigmoid(x), want, rtol=1e-15)


def test_sigmoid_extreme_inputs_stay_finite():
    y = numcore.sigmoid(np.array([[-500.0, 500.0]]))
    assert np.all(np.isfinite(y))
    npt.assert_allclose(y, [[0.0, 1.0]], atol=1e-12)


def test_tanh_against_exp_formula():
    x = np.array([[-1.0, 0.0, 1.0]])
    want = (np.exp(x) - np.exp(-x)) / (np.exp(x) + np.exp(-x))
    npt.assert_allclose(numcore.tanh(x), want, rtol=1e-15)


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "relu"])
def test_activation_backward_matches_finite_differences(name):
    rng = numcore.new_rng(7)
    x = rng.standard_normal((3, 4)) * 2.0
    r = rng.standard_normal((3, 4))
    if name == "sigmoid":
        loss = lambda: float((numcore.sigmoid(x) * r).sum())
        dx = numcore.sigmoid_backward(r, numcore.sigmoid(x))
    elif name == "tanh":
        loss = lambda: float((numcore.tanh(x) * r).sum())
        dx = numcore.tanh_backward(r, numcore.tanh(x))
    else:
        x += 0.05  # keep entries away from the kink
        loss = lambda: float((numcore.relu(x) * r).sum())
        dx = numcore.relu_backward(r, x)
    npt.assert_allclose(dx, fd_grad(loss, x), atol=1e-6)


def test_zero_upstream_gives_zero_grads():
    rng = numcore.new_rng(1)
    x = rng.standard_normal((2, 3))
    z = np.zeros((2, 3))
    npt.assert_array_equal(numcore.sigmoid_backward(z, numcore.sigmoid(x)), z)
    npt.assert_array_equal(numcore.relu_backward(z, x), z)
    da, db = numcore.matmul_backward(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((3, 2)))
    assert not da.any() and not db.any()


# ---------------------------------------------------------------------------
# masked softmax
# ---------------------------------------------------------------------------


def test_masked_softmax_single_unmasked_position_gets_weight_one():
    scores = np.array([[3.0, -1.0, 2.0]])
    mask = np.array([True, False, True])
    out = numcore.masked_row_softmax(scores, mask)
    npt.assert_array_equal(out, [[0.0, 1.0, 0.0]])


def test_masked_softmax_uniform_scores_uniform_weights():
    scores = np.zeros((1, 4))
    out = numcore.masked_row_softmax(scores, np.zeros(4, dtype=bool))
    npt.assert_allclose(out, np.full((1, 4), 0.25), rtol=1e-15)


def test_masked_softmax_against_direct_formula():
    rng = numcore.new_rng(5)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        scores = rng.standard_normal((1, n)) * 5
        mask = rng.random(n) < 0.4
        mask[int(rng.integers(0, n))] = False  # keep at least one key
        out = numcore.masked_row_softmax(scores, mask)
        keep = ~mask
        e = np.exp(scores[0, keep])
        want = np.zeros(n)
        want[keep] = e / e.sum()
        npt.assert_allclose(out[0], want, rtol=1e-12, atol=0)
        assert np.all(out[0, mask] == 0.0)
        npt.assert_allclose(out.sum(), 1.0, rtol=1e-12)


def test_masked_softmax_huge_scores_do_not_overflow():
    scores = np.array([[1000.0, 999.0, -1000.0]])
    out = numcore.masked_row_softmax(scores, np.zeros(3, dtype=bool))
    assert np.all(np.isfinite(out))
    npt.assert_allclose(out.sum(), 1.0, rtol=1e-12)


def test_masked_softmax_all_masked_raises():
    with pytest.raises(DegenerateMaskError):
        numcore.masked_row_softmax(np.zeros((1, 3)), np.ones(3, dtype=bool))


def test_masked_softmax_backward_matches_finite_differences():
    rng = numcore.new_rng(9)
    scores = rng.standard_normal((2, 5))
    mask = np.array([False, True, False, False, True])
    r = rng.standard_normal((2, 5))
    loss = lambda: float((numcore.masked_row_softmax(scores, mask) * r).sum())
    weights = numcore.masked_row_softmax(scores, mask)
    dscores = numcore.masked_row_softmax_backward(r, weights)
    npt.assert_allclose(dscores, fd_grad(loss, scores), atol=1e-6)


# ---------------------------------------------------------------------------
# layernorm
# ---------------------------------------------------------------------------


def test_layernorm_standardizes_rows():
    x = np.array([[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 30.0, 30.0]])
    gamma, beta = np.ones((1, 4)), np.zeros((1, 4))
    out, _ = numcore.layernorm(x, gamma, beta)
    npt.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    npt.assert_allclose(out.std(axis=1), 1.0, rtol=1e-4)  # eps shifts it slightly


def test_layernorm_affine_applies_after_standardizing():
    x = np.array([[2.0, 4.0]])
    gamma = np.array([[3.0, 3.0]])
    beta = np.array([[1.0, -1.0]])
    out, _ = numcore.layernorm(x, gamma, beta)
    # standardized row is (-1, 1) up to the eps correction
    npt.assert_allclose(out, [[-2.0, 2.0]], rtol=1e-4)


def test_layernorm_backward_matches_finite_differences():
    rng = numcore.new_rng(13)
    x = rng.standard_normal((3, 6))
    gamma = rng.standard_normal((1, 6))
    beta = rng.standard_normal((1, 6))
    r = rng.standard_normal((3, 6))
    loss = lambda: float((numcore.layernorm(x, gamma, beta)[0] * r).sum())
    _, cache = numcore.layernorm(x, gamma, beta)
    dx, dgamma, dbeta = numcore.layernorm_backward(r, cache)
    npt.assert_allclose(dx, fd_grad(loss, x), atol=1e-5)
    npt.assert_allclose(dgamma, fd_grad(loss, gamma), atol=1e-5)
    npt.assert_allclose(dbeta, fd_grad(loss, beta), atol=1e-5)


# ---------------------------------------------------------------------------
# init / params / Adam
# ---------------------------------------------------------------------------


def test_xavier_uniform_respects_bound_and_seed():
    rng = numcore.new_rng(21)
    w = numcore.xavier_uniform(40, 60, rng)
    bound = math.sqrt(6.0 / (40 + 60))
    assert w.shape == (40, 60)
    assert np.all(np.abs(w) <= bound)
    assert np.abs(w).max() > 0.8 * bound  # actually spans the range
    w2 = numcore.xavier_uniform(40, 60, numcore.new_rng(21))
    npt.assert_array_equal(w, w2)


def test_param_requires_2d():
    with pytest.raises(DimensionError):
        Param("bad", np.zeros(3))


def test_param_zero_grad():
    p = Param("w", np.ones((2, 2)))
    p.grad += 5.0
    p.zero_grad()
    npt.assert_array_equal(p.grad, np.zeros((2, 2)))


def test_adam_zero_grad_leaves_value_unchanged():
    p = Param("w", np.full((2, 2), 7.0))
    adam_step(p, AdamState.for_param(p))
    npt.assert_array_equal(p.value, np.full((2, 2), 7.0))


def test_adam_first_step_matches_hand_computation():
    # With g=1: m_hat = v_hat = 1, so the step is -lr/(1+eps) = -0.001 almost exactly.
    p = Param("w", np.zeros((1, 1)))
    p.grad[:] = 1.0
    adam_step(p, AdamState.for_param(p, lr=1e-3))
    assert abs(p.value[0, 0] - (-1e-3)) < 1e-7


def test_adam_two_steps_hand_computation():
    p = Param("w", np.zeros((1, 1)))
    st = AdamState.for_param(p, lr=0.1)
    m = v = 0.0
    theta = 0.0
    for step in (1, 2):
        g = float(step)  # grads 1 then 2
        p.grad[:] = g
        adam_step(p, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** step)
        vh = v / (1 - 0.999 ** step)
        theta -= 0.1 * mh / (math.sqrt(vh) + 1e-8)
        p.grad[:] = 0.0
    npt.assert_allclose(p.value[0, 0], theta, rtol=1e-12)


def test_adam_optimizer_is_deterministic():
    def run():
        rng = numcore.new_rng(2)
        params = [Param("a", rng.standard_normal((3, 3))),
                  Param("b", rng.standard_normal((1, 3)))]
        opt = Adam(params, lr=0.01)
        for _ in range(5):
            for p in params:
                p.grad[:] = p.value * 0.5 + 1.0
            opt.step()
            opt.zero_grads()
        return [p.value.copy() for p in params]

    first, second = run(), run()
    for a, b in zip(first, second):
        npt.assert_array_equal(a, b)


def test_adam_descends_a_quadratic():
    p = Param("w", np.array([[5.0]]))
    opt = Adam([p], lr=0.1)
    for _ in range(200):
        p.grad[:] = 2.0 * p.value      # d/dw of w^2
        opt.step()
        opt.zero_grads()
    assert abs(p.value[0, 0]) < 0.1
