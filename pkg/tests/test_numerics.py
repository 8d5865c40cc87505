"""Dense kernels and optimizers against hand-worked oracles."""

import numpy as np
import pytest

from conda_adapt.numerics import (ADAM_EPS, NotPositiveDefiniteError, OptimizerState,
                                  as_f64, cholesky_inverse, finite_diff_check,
                                  log_softmax, matmul, optimizer_step, softmax)


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 7))
    b = rng.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)


def test_matmul_rejects_bad_inputs():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        matmul(np.ones(3), np.ones((3, 2)))
    with pytest.raises(ValueError):
        matmul(np.array([[np.nan, 0.0]]), np.ones((2, 1)))
    with pytest.raises(TypeError):
        as_f64(np.array(["a"]), "arr")


def test_cholesky_inverse_oracle():
    low = np.array([[2.0, 0.0, 0.0], [0.5, 1.5, 0.0], [-1.0, 0.25, 1.0]])
    spd = low @ low.T
    inv = cholesky_inverse(spd)
    np.testing.assert_allclose(inv @ spd, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(inv, inv.T, atol=0.0)  # exactly re-symmetrized


def test_cholesky_inverse_rejects():
    with pytest.raises(ValueError):
        cholesky_inverse(np.arange(6.0).reshape(2, 3))
    with pytest.raises(ValueError):
        cholesky_inverse(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_inverse(np.diag([1.0, -1.0]))


def test_sgd_step_exact():
    p = np.array([1.0, -2.0])
    state = OptimizerState(kind="sgd", learning_rate=0.1)
    optimizer_step(state, [p], [np.array([0.5, -1.0])])
    np.testing.assert_allclose(p, [0.95, -1.9], atol=0.0)
    assert state.step_count == 1


def test_adam_first_two_steps_exact():
    # constant unit gradient: bias correction makes both steps lr/(1 + eps)
    p = np.array([0.0])
    g = np.array([1.0])
    state = OptimizerState(kind="adam", learning_rate=0.01)
    optimizer_step(state, [p], [g])
    step = 0.01 / (1.0 + ADAM_EPS)
    np.testing.assert_allclose(p, [-step], atol=1e-15)
    optimizer_step(state, [p], [g])
    np.testing.assert_allclose(p, [-2.0 * step], rtol=1e-9)
    assert state.step_count == 2
    assert len(state.first_moment) == 1


def test_adam_moments_are_stateful():
    # a sign flip after many same-sign steps barely moves the first moment
    p = np.array([0.0])
    state = OptimizerState(kind="adam", learning_rate=0.1)
    for _ in range(50):
        optimizer_step(state, [p], [np.array([1.0])])
    before = p.copy()
    optimizer_step(state, [p], [np.array([-1.0])])
    assert p[0] < before[0]  # still descending: momentum dominates one bad grad


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerState(kind="rmsprop", learning_rate=0.1)
    with pytest.raises(ValueError):
        OptimizerState(kind="sgd", learning_rate=-0.1)
    state = OptimizerState(kind="sgd", learning_rate=0.1)
    with pytest.raises(ValueError):
        optimizer_step(state, [np.zeros(2)], [])
    with pytest.raises(ValueError):
        optimizer_step(state, [np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ValueError):
        optimizer_step(state, [np.zeros(2)], [np.array([np.nan, 0.0])])


def test_finite_diff_accepts_true_gradient():
    coef = np.array([1.0, 2.0, 3.0])

    def loss(x):
        return float(np.sum(coef * x * x))

    x = np.array([0.3, -0.7, 1.1])
    err = finite_diff_check(loss, x, 2.0 * coef * x)
    assert err < 1e-6


def test_finite_diff_flags_wrong_gradient():
    def loss(x):
        return float(np.sum(x * x))

    x = np.array([0.5, -0.25])
    err = finite_diff_check(loss, x, np.array([2.0, 2.0]))  # second entry wrong
    assert err > 1e-2


def test_softmax_hand_values():
    probs = softmax(np.array([[0.0, np.log(3.0)]]))
    np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-12)
    big = softmax(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(big, [[0.5, 0.5]], atol=1e-12)


def test_log_softmax_consistent():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 4)) * 10
    np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)
