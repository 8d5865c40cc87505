"""Float64 dense kernels, first-order optimizers, and a gradient checker.

All heavy linear algebra in the package funnels through here.  Inputs are
validated once at this boundary (shape agreement, finiteness) so the callers
above can stay terse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SYMMETRY_TOL = 1e-9


class NotPositiveDefiniteError(ValueError):
    """Cholesky factorization failed: the matrix is not positive definite."""


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")


def as_f64(arr, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting non-numeric input."""
    out = np.asarray(arr)
    if out.dtype.kind not in "fiu":
        raise TypeError(f"{name} must be numeric, got dtype {out.dtype}")
    return np.ascontiguousarray(out, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 2-D float64 matrices with validated shapes."""
    a = as_f64(a, "a")
    b = as_f64(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    check_finite(a, "a")
    check_finite(b, "b")
    return a @ b


def cholesky_inverse(s: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky.

    Raises NotPositiveDefiniteError if the factorization fails, and ValueError
    if the input is not square-symmetric to within 1e-9.
    """
    s = as_f64(s, "s")
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    check_finite(s, "s")
    asym = float(np.max(np.abs(s - s.T))) if s.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric (max |s - s.T| = {asym:.3e})")
    try:
        factor = cho_factor(s, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    except ValueError as exc:  # scipy raises ValueError for some singular inputs
        raise NotPositiveDefiniteError(str(exc)) from exc
    inv = cho_solve(factor, np.eye(s.shape[0]), check_finite=False)
    # cho_solve output can drift off symmetric by rounding; re-impose it so the
    # result satisfies the same contract as the input.
    return 0.5 * (inv + inv.T)


@dataclass
class OptimizerState:
    """Mutable state for plain SGD or Adam over a fixed list of parameters.

    The moment buffers are keyed by position in the parameter list, so the
    caller must pass the same parameters in the same order on every step.
    """

    kind: str
    learning_rate: float
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}; use 'sgd' or 'adam'")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: list, grads: list) -> None:
    """Apply one in-place update to ``params`` given matching ``grads``.

    SGD: p -= lr * g.  Adam: bias-corrected first/second moments with the
    standard constants (beta1 0.9, beta2 0.999, eps 1e-8).
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"param shape {p.shape} does not match grad shape {g.shape}")
        check_finite(g, "gradient")

    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
        return

    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("parameter list changed length mid-run")
    t = state.step_count
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def finite_diff_check(loss_fn, params: np.ndarray, analytic_grad: np.ndarray,
                      h: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    ``loss_fn`` maps an array of ``params.shape`` to a scalar.  The relative
    error per coordinate uses max(|a|, |b|, 1e-8) as denominator so exact
    zeros compare cleanly.
    """
    params = as_f64(params, "params")
    analytic_grad = as_f64(analytic_grad, "analytic_grad")
    if params.shape != analytic_grad.shape:
        raise ValueError("params and analytic_grad shapes differ")
    worst = 0.0
    flat = params.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(loss_fn(params))
        flat[i] = orig - h
        lo = float(loss_fn(params))
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * h)
        a = float(analytic_grad.ravel()[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    z = as_f64(logits, "logits")
    if z.ndim != 2:
        raise ValueError(f"expected 2-D logits, got shape {z.shape}")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = as_f64(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
