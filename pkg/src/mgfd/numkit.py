"""Dense float64 kernels with hand-written gradients, Adam, and a gradient checker.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  Every
differentiable operation comes as a forward function plus a matching
``*_backward`` function; losses return ``(value, grad)`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SIMPLEX_TOL = 1e-8


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# forward / backward pairs


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dc @ b.T, a.T @ dc


def row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the softmax output ``p`` and ``dL/dp``."""
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def tanh_map(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def relu_map(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, dy, 0.0)


# ---------------------------------------------------------------------------
# losses


def one_hot(labels: Sequence[int], k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy_masked(logits: np.ndarray, labels: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the rows in ``mask``.

    ``labels`` is one-hot with the same shape as ``logits``.  The gradient is
    exactly zero on every row outside the mask.
    """
    if logits.shape != labels.shape:
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    idx = np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cross_entropy_masked: empty mask")
    if idx.min() < 0 or idx.max() >= logits.shape[0]:
        raise IndexError("cross_entropy_masked: mask index out of range")
    logp = log_softmax(logits[idx])
    y = labels[idx]
    loss = -float((y * logp).sum()) / idx.size
    grad = np.zeros_like(logits)
    p = np.exp(logp)
    # p * sum(y) - y, so non-normalised targets stay exact
    np.add.at(grad, idx, (p * y.sum(axis=1, keepdims=True) - y) / idx.size)
    return loss, grad


def kl_rows(target: np.ndarray, student_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row KL(target || softmax(student_logits)) and the student softmax."""
    if target.shape != student_logits.shape:
        raise DimensionError(f"target {target.shape} vs logits {student_logits.shape}")
    logq = log_softmax(student_logits)
    safe = np.where(target > 0.0, target, 1.0)
    terms = np.where(target > 0.0, target * (np.log(safe) - logq), 0.0)
    return terms.sum(axis=1), np.exp(logq)


def kl_divergence_rows(
    target_probs: np.ndarray, student_logits: np.ndarray, row_weights
) -> tuple[float, np.ndarray]:
    """Weighted sum of row-wise KL(target || student); callers normalise."""
    w = np.asarray(row_weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != target_probs.shape[0]:
        raise DimensionError(f"{w.shape[0]} weights for {target_probs.shape[0]} rows")
    if np.any(w < 0):
        raise ValueError("kl_divergence_rows: negative row weight")
    per_row, q = kl_rows(target_probs, student_logits)
    mass = target_probs.sum(axis=1, keepdims=True)
    grad = w[:, None] * (q * mass - target_probs)
    return float(w @ per_row), grad


def entropy_of_mean(c: np.ndarray) -> tuple[float, np.ndarray]:
    """Entropy of the column means of a row-stochastic matrix, with gradient."""
    if c.ndim != 2 or c.shape[0] == 0:
        raise DimensionError(f"entropy_of_mean needs a non-empty 2-D matrix, got {c.shape}")
    if np.any(c < -SIMPLEX_TOL) or np.any(np.abs(c.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("entropy_of_mean: rows must lie on the probability simplex")
    n = c.shape[0]
    cbar = c.mean(axis=0)
    pos = cbar > 0.0
    logc = np.log(np.where(pos, cbar, 1.0))
    h = -float(np.sum(np.where(pos, cbar * logc, 0.0)))
    # a zero column mean has an unbounded derivative; treat it as flat
    dcbar = np.where(pos, -(logc + 1.0), 0.0)
    grad = np.broadcast_to(dcbar / n, c.shape).copy()
    return h, grad


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = field(default=0, init=False)

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient {g.shape} for parameter {self.value.shape}")
        self.grad += g


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def adam_step(params: Iterable[ParamTensor], cfg: AdamConfig) -> None:
    """One Adam update in place, with decoupled weight decay."""
    for p in params:
        p.step += 1
        if cfg.weight_decay:
            p.value *= 1.0 - cfg.learning_rate * cfg.weight_decay
        g = p.grad
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * (g * g)
        m_hat = p.m / (1.0 - cfg.beta1**p.step)
        v_hat = p.v / (1.0 - cfg.beta2**p.step)
        p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(
    fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare ``grad_fn(x)`` with central differences of the scalar ``fn``."""
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(grad_fn(x.copy()), dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    numeric = numeric_grad(fn, x, step)
    return GradCheckReport(relative_error(analytic, numeric), tolerance, x.size)


def away_from_kinks(x: np.ndarray, rng: np.random.Generator, margin: float = 1e-4) -> np.ndarray:
    """Resample entries that sit within ``margin`` of the ReLU kink at 0."""
    x = np.array(x, dtype=np.float64)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) < margin
    return x
