"""Loss terms of the joint objective and their analytic gradients.

Three terms: supervised cross-entropy on labeled batches, threshold-masked
cross-entropy against calibrated pseudo-label targets, and a multi-positive
margin contrastive loss over cosine similarities. The contrastive loss is
implemented three algebraically equal ways; the log1p form is the production
path because it composes from log-sum-exps and a softplus and therefore never
overflows even at large scale factors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ContrastiveInputs:
    """Similarities feeding one query's contrastive term.

    s_p / s_n are positive / negative cosine similarities in [-1, 1];
    alpha_p holds one self-paced weight in [0, 1] per positive; gamma is the
    inverse temperature and margin the additive offset on negatives.
    """

    s_p: np.ndarray
    alpha_p: np.ndarray
    s_n: np.ndarray
    gamma: float
    margin: float


@dataclass
class LossOutput:
    value: float
    grad_sp: np.ndarray
    grad_sn: np.ndarray


@dataclass
class LossWeights:
    lambda_pl: float = 1.0
    lambda_ctr: float = 1.0


def cross_entropy(target: np.ndarray, logits: np.ndarray) -> tuple[float, np.ndarray]:
    """H(target, softmax(logits)) and its gradient w.r.t. the logits.

    target must be a valid probability vector (one-hot allowed); the gradient
    is softmax(logits) - target.
    """
    t = np.asarray(target, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    if t.shape != z.shape:
        raise ValueError(f"length mismatch: target {t.shape} vs logits {z.shape}")
    shifted = z - z.max()
    log_norm = np.log(np.sum(np.exp(shifted)))
    log_probs = shifted - log_norm
    value = -float(np.dot(t, log_probs))
    grad = np.exp(log_probs) - t
    return value, grad


def sup_loss(targets: list[int], logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean one-hot cross-entropy over a labeled batch.

    An empty batch signals the labeled-only degenerate case and yields zero
    loss and gradients.
    """
    n = len(targets)
    if n == 0:
        return 0.0, np.zeros_like(np.asarray(logits, dtype=np.float64))
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[0] != n:
        raise ValueError("batch size mismatch between targets and logits")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_norm
    idx = np.arange(n)
    value = -float(np.mean(log_probs[idx, targets]))
    grad = np.exp(log_probs)
    grad[idx, targets] -= 1.0
    return value, grad / n


def pseudo_label_loss(
    pseudo: np.ndarray,
    tau: float,
    strong_logits: np.ndarray,
) -> tuple[float, np.ndarray, int]:
    """Threshold-masked cross-entropy against fixed pseudo-label targets.

    pseudo is an (n, C) array of calibrated target distributions, treated as
    constants. Entries whose max target probability falls below tau
    contribute zero loss and zero gradient; the sum is normalized by the full
    entry count n, not by the kept count.
    """
    p = np.asarray(pseudo, dtype=np.float64)
    z = np.asarray(strong_logits, dtype=np.float64)
    n = p.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(z), 0
    if z.shape != p.shape:
        raise ValueError(f"shape mismatch: pseudo {p.shape} vs logits {z.shape}")
    mask = p.max(axis=1) >= tau
    kept = int(mask.sum())
    if kept == 0:
        return 0.0, np.zeros_like(z), 0
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_norm
    per_entry = -np.sum(p * log_probs, axis=1)
    value = float(np.sum(per_entry[mask]) / n)
    grad = (np.exp(log_probs) - p) / n
    grad[~mask] = 0.0
    return value, grad, kept


def _check_contrastive(inp: ContrastiveInputs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sp = np.asarray(inp.s_p, dtype=np.float64)
    ap = np.asarray(inp.alpha_p, dtype=np.float64)
    sn = np.asarray(inp.s_n, dtype=np.float64)
    if sp.size == 0 or sn.size == 0:
        raise ValueError("degenerate contrastive batch")
    if ap.shape != sp.shape:
        raise ValueError("alpha_p must pair one weight per positive")
    if inp.gamma <= 0:
        raise ValueError("nonpositive scale")
    return sp, ap, sn


def contrastive_loss(inp: ContrastiveInputs) -> LossOutput:
    """Multi-positive margin contrastive loss, log1p form (production path).

    value = log(1 + sum_neg exp(gamma*(s_n+m)) * sum_pos exp(-gamma*alpha*s_p))
    computed as softplus(A + B) with A, B the two log-sum-exps, so the scale
    factor can reach the hundreds without overflow. Gradients are exact
    partials w.r.t. each similarity; alpha_p and gamma are constants.
    """
    sp, ap, sn = _check_contrastive(inp)
    g, m = inp.gamma, inp.margin

    neg_logits = g * (sn + m)
    pos_logits = -g * ap * sp
    nmax = float(neg_logits.max())
    pmax = float(pos_logits.max())
    neg_exp = np.exp(neg_logits - nmax)
    pos_exp = np.exp(pos_logits - pmax)
    a = nmax + float(np.log(neg_exp.sum()))
    b = pmax + float(np.log(pos_exp.sum()))
    t = a + b
    value = max(t, 0.0) + float(np.log1p(np.exp(-abs(t))))

    # sigmoid(t), stable on both tails
    if t >= 0:
        sig = 1.0 / (1.0 + np.exp(-t))
    else:
        et = np.exp(t)
        sig = et / (1.0 + et)
    w_neg = neg_exp / neg_exp.sum()
    w_pos = pos_exp / pos_exp.sum()
    grad_sn = sig * g * w_neg
    grad_sp = -sig * g * ap * w_pos
    return LossOutput(value, grad_sp, grad_sn)


def contrastive_loss_softmax_form(inp: ContrastiveInputs) -> float:
    """First algebraic form: softmax ratio with the margin inside the positives.

    The positive aggregate is the soft-min 1 / sum exp(-gamma*(alpha*s_p - m)),
    which for a single positive is plain exp(gamma*(alpha*s_p - m)) and in
    general makes all three forms exactly equal (the ratio targets the worst
    positive, matching the min over positives in the loss's min-max bound).
    """
    sp, ap, sn = _check_contrastive(inp)
    g, m = inp.gamma, inp.margin
    pos = 1.0 / np.sum(np.exp(-g * (ap * sp - m)))
    neg = np.sum(np.exp(g * sn))
    return float(-np.log(pos / (pos + neg)))


def contrastive_loss_margin_neg_form(inp: ContrastiveInputs) -> float:
    """Second algebraic form: margin moved onto the negative similarities."""
    sp, ap, sn = _check_contrastive(inp)
    g, m = inp.gamma, inp.margin
    pos = 1.0 / np.sum(np.exp(-g * ap * sp))
    neg = np.sum(np.exp(g * (sn + m)))
    return float(-np.log(pos / (pos + neg)))


def total_loss(
    sup: tuple[float, np.ndarray],
    pl: tuple[float, np.ndarray],
    ctr: tuple[float, np.ndarray],
    w: LossWeights,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Weighted sum of the three terms; gradient streams scaled per weight."""
    value = sup[0] + w.lambda_pl * pl[0] + w.lambda_ctr * ctr[0]
    return value, sup[1], w.lambda_pl * pl[1], w.lambda_ctr * ctr[1]


__all__ = [
    "ContrastiveInputs",
    "LossOutput",
    "LossWeights",
    "cross_entropy",
    "sup_loss",
    "pseudo_label_loss",
    "contrastive_loss",
    "contrastive_loss_softmax_form",
    "contrastive_loss_margin_neg_form",
    "total_loss",
]
