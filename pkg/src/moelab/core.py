"""Numerical primitives: stable softmax, top-k, Pearson with significance, FD gradients.

Everything operates on float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateSeriesError, DomainError, NumericError


def _as_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("logits must be a non-empty 1-d vector")
    if np.isnan(x).any():
        raise DomainError("logits contain NaN")
    return x


def softmax(logits) -> np.ndarray:
    """Softmax with max subtraction. Entries equal to -inf get probability 0."""
    x = _as_logits(logits)
    m = x.max()
    if not np.isfinite(m):
        raise DomainError("softmax needs at least one finite logit")
    e = np.exp(x - m)
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    x = _as_logits(logits)
    m = x.max()
    if not np.isfinite(m):
        raise DomainError("log_softmax needs at least one finite logit")
    z = x - m
    return z - math.log(np.exp(z).sum())


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log_softmax for a 2-d array (batched logit-lens projections)."""
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def top_k_indices(scores, k: int) -> list[int]:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if k < 0 or k > s.size:
        raise DomainError(f"k={k} outside [0, {s.size}]")
    # stable sort on the negated scores keeps ascending index among equals
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; maps 0 to 0 exactly
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"relu": relu, "gelu": gelu}


def activation_grad(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (x > 0).astype(np.float64)
    return gelu_grad(x)


# ---------------------------------------------------------------------------
# Pearson correlation and Student-t significance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: float
    n: int


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued fraction, using the symmetry relation for convergence."""
    if not (0.0 <= x <= 1.0):
        raise DomainError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided p-value of a Student-t statistic."""
    if df <= 0:
        raise DomainError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DomainError("series must be 1-d and of equal length")
    n = xs.size
    if n < 3:
        raise DomainError("pearson needs at least 3 observations")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSeriesError("series has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return CorrelationResult(r=r, p=0.0, n=n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return CorrelationResult(r=r, p=t_two_sided_p(t, n - 2), n=n)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise DomainError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_gradient_batched(
    f_batch: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-4
) -> np.ndarray:
    """Central differences where ``f_batch`` maps a (B, n) stack of points to B values.

    Same arithmetic as :func:`finite_diff_gradient`, evaluated in one batched call.
    """
    if h <= 0:
        raise DomainError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    pts = np.repeat(x[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    pts[idx, idx] += h
    pts[n + idx, idx] -= h
    vals = np.asarray(f_batch(pts), dtype=np.float64)
    if not np.isfinite(vals).all():
        raise NumericError("non-finite function value in batched finite differences")
    return (vals[:n] - vals[n:]) / (2.0 * h)
