"""Scalar and vector numerical primitives shared by every other module.

All functions take 1-D float64 arrays (or anything castable to one) and are
deterministic given their inputs; ``beta_sample`` additionally depends on the
state of the generator passed in. Log-sum-exp style reductions use the
max-subtraction trick so scaled inputs up to ~700 in magnitude cannot
overflow.
"""
from __future__ import annotations

import numpy as np

LOG2 = float(np.log(2.0))


def _as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def lse(x, gamma: float) -> float:
    """Scaled log-sum-exp: (1/gamma) * log(sum_i exp(gamma * x_i)).

    A smooth upper approximation of max(x): the result lies in
    [max(x), max(x) + log(len(x))/gamma].
    """
    v = _as_vec(x)
    if v.size == 0:
        raise ValueError("empty vector")
    if gamma <= 0:
        raise ValueError("nonpositive scale")
    z = gamma * v
    m = float(z.max())
    return (m + float(np.log(np.sum(np.exp(z - m))))) / gamma


def neg_lse(x, gamma: float) -> float:
    """Scaled negative log-sum-exp, a smooth lower approximation of min(x).

    Result lies in [min(x) - log(len(x))/gamma, min(x)].
    """
    v = _as_vec(x)
    if v.size == 0:
        raise ValueError("empty vector")
    if gamma <= 0:
        raise ValueError("nonpositive scale")
    return -lse(-v, gamma)


def softplus(x: float) -> float:
    """log(1 + exp(x)) via the stable branch max(x, 0) + log1p(exp(-|x|))."""
    x = float(x)
    return max(x, 0.0) + float(np.log1p(np.exp(-abs(x))))


def softmax(x) -> np.ndarray:
    """Max-subtracted softmax of a 1-D vector; output sums to 1."""
    v = _as_vec(x)
    if v.size == 0:
        raise ValueError("empty vector")
    z = np.exp(v - v.max())
    return z / z.sum()


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise max-subtracted softmax of a 2-D array."""
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cosine_similarity(u, v) -> float:
    """<u, v> / (|u| |v|), rejecting near-zero operands."""
    a = _as_vec(u, "u")
    b = _as_vec(v, "v")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("degenerate vector")
    return float(np.dot(a, b) / (na * nb))


def l2_normalize(v) -> np.ndarray:
    """v / |v|, rejecting near-zero input (a zero direction is always a bug)."""
    a = _as_vec(v)
    n = float(np.linalg.norm(a))
    if n <= 1e-12:
        raise ValueError("degenerate vector")
    return a / n


def beta_sample(alpha: float, rng: np.random.Generator) -> float:
    """One draw from Beta(alpha, alpha).

    alpha=1 is a plain uniform draw; general alpha uses the gamma-ratio
    construction G1/(G1+G2), which needs no rejection loop.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha == 1.0:
        return float(rng.random())
    g1 = float(rng.gamma(alpha))
    g2 = float(rng.gamma(alpha))
    total = g1 + g2
    if total <= 0.0:  # only reachable for extreme alpha underflow
        return 0.5
    return g1 / total
