"""Dense float64 numerics: forward/backward op pairs, init, and Adam.

Everything operates on plain 2-D numpy float64 arrays ("matrices"; vectors
are kept as 1xN matrices so every learnable tensor has a rows x cols shape).
There is no graph or tape: each differentiable operation is a forward
function that returns its output plus whatever the backward pass needs, and
a matching backward function that maps the upstream gradient onto input and
parameter gradients. Callers chain backwards in reverse order. Parameter
gradients accumulate into Param.grad until zero_grads.

Single-threaded by contract on the training path; with a fixed seed the
whole stack is bitwise-reproducible within one build.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Matrix = np.ndarray  # 2-D float64 throughout


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A softmax row has no unmasked column left to normalize over."""


def new_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; same seed gives the same draw sequence."""
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def ones(rows: int, cols: int) -> Matrix:
    return np.ones((rows, cols), dtype=np.float64)


def xavier_uniform(rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    """Uniform in [-b, b] with b = sqrt(6 / (rows + cols))."""
    if rows <= 0 or cols <= 0:
        raise DimensionError(f"xavier_uniform needs positive dims, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(g: Matrix, a: Matrix, b: Matrix) -> tuple[Matrix, Matrix]:
    """Upstream g = dL/d(a@b) -> (dL/da, dL/db)."""
    return g @ b.T, a.T @ g


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} + {b.shape}")
    return a + b


def broadcast_add_row(x: Matrix, r: Matrix) -> Matrix:
    """Add the 1xD row r to every row of x (L x D)."""
    if r.shape != (1, x.shape[1]):
        raise DimensionError(f"broadcast_add_row: {x.shape} + row {r.shape}")
    return x + r


def broadcast_add_row_backward(g: Matrix) -> tuple[Matrix, Matrix]:
    """-> (dx, dr); the row gradient is the column-sum of g."""
    return g, g.sum(axis=0, keepdims=True)


def sigmoid(x: Matrix) -> Matrix:
    # Piecewise form avoids overflow in exp for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(g: Matrix, y: Matrix) -> Matrix:
    """y is the forward output sigmoid(x)."""
    return g * y * (1.0 - y)


def tanh(x: Matrix) -> Matrix:
    return np.tanh(x)


def tanh_backward(g: Matrix, y: Matrix) -> Matrix:
    """y is the forward output tanh(x)."""
    return g * (1.0 - y * y)


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def relu_backward(g: Matrix, x: Matrix) -> Matrix:
    """x is the forward input (pre-activation)."""
    return g * (x > 0.0)


def masked_row_softmax(scores: Matrix, key_mask: np.ndarray) -> Matrix:
    """Row-wise softmax over the unmasked columns only.

    key_mask is a boolean vector of length scores.cols; True marks a padded
    column. Masked columns get weight exactly 0.0 and never enter the
    max-subtraction or the exponentials, so no -inf arithmetic occurs.
    """
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape != (scores.shape[1],):
        raise DimensionError(
            f"masked_row_softmax: mask length {key_mask.shape} vs {scores.shape[1]} columns"
        )
    if key_mask.all():
        raise DegenerateMaskError("masked_row_softmax: every column is masked")
    live = ~key_mask
    out = np.zeros_like(scores, dtype=np.float64)
    sub = scores[:, live]
    sub = np.exp(sub - sub.max(axis=1, keepdims=True))
    out[:, live] = sub / sub.sum(axis=1, keepdims=True)
    return out


def masked_row_softmax_backward(g: Matrix, weights: Matrix) -> Matrix:
    """weights is the forward output; masked columns stay exactly 0."""
    dot = (g * weights).sum(axis=1, keepdims=True)
    return weights * (g - dot)


def layernorm(
    x: Matrix, gamma: Matrix, beta: Matrix, eps: float = 1e-5
) -> tuple[Matrix, tuple]:
    """Per-row mean-0/var-1 normalization, then affine scale and shift.

    gamma and beta are 1xD rows. Returns (out, cache) for the backward pass.
    """
    if gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise DimensionError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs {x.shape[1]} columns"
        )
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma * xhat + beta
    return out, (xhat, inv, gamma)


def layernorm_backward(g: Matrix, cache: tuple) -> tuple[Matrix, Matrix, Matrix]:
    """-> (dx, dgamma, dbeta)."""
    xhat, inv, gamma = cache
    dgamma = (g * xhat).sum(axis=0, keepdims=True)
    dbeta = g.sum(axis=0, keepdims=True)
    dxhat = g * gamma
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------


@dataclass
class Param:
    """A learnable matrix with an accumulating gradient buffer."""

    name: str
    value: Matrix
    grad: Matrix = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise DimensionError(f"param {self.name}: value must be 2-D, got {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"param {self.name}: grad shape {self.grad.shape} vs value {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class AdamState:
    """Per-parameter Adam moments and hyperparameters."""

    m: Matrix
    v: Matrix
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Param, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), **hyper)


def adam_step(param: Param, state: AdamState) -> None:
    """One bias-corrected Adam update from param.grad; increments state.step."""
    if state.m.shape != param.value.shape:
        raise DimensionError(
            f"adam_step: state shape {state.m.shape} vs param {param.value.shape}"
        )
    state.step += 1
    g = param.grad
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    """Drives adam_step over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.pairs = [
            (p, AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon))
            for p in params
        ]

    def step(self) -> None:
        for p, s in self.pairs:
            adam_step(p, s)

    def zero_grads(self) -> None:
        for p, _ in self.pairs:
            p.zero_grad()
