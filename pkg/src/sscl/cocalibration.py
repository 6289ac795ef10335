"""Bidirectional calibration state between the classifier and contrastive branches.

The classifier branch hands pseudo-label assignments to the contrastive
branch for positive-key selection; the contrastive branch hands a running
class-similarity distribution back, rescaling the classifier's pseudo labels.
Class prototypes (normalized mean features, optionally enriched with mixup
samples mined from confident pseudo labels) anchor both directions.

State is mutated only at refresh boundaries; batch steps read an immutable
snapshot.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core_math import beta_sample, cosine_similarity, l2_normalize, softmax_rows
from .data import Sample

CALIB_DUMP_HEADER = "SSCL-CALIB v1"

# p_hat_s entries are floored here before calibration so no class can be
# permanently locked out early in training.
CALIBRATION_FLOOR = 1e-12


@dataclass
class Prototype:
    class_id: int
    vector: np.ndarray  # unit norm, feature dim
    support_count: int


@dataclass
class PseudoRecord:
    assigned: int
    confidence: float
    alpha: float
    target: np.ndarray  # full calibrated distribution, the CE target


class RunningSimilarity:
    """Windowed running average of per-batch mean similarity distributions."""

    def __init__(self, num_classes: int, window: int = 128):
        if num_classes < 2 or window < 1:
            raise ValueError("need num_classes >= 2 and window >= 1")
        self.num_classes = num_classes
        self.t = window
        self.window: deque[np.ndarray] = deque()
        self._current = np.full(num_classes, 1.0 / num_classes)

    @property
    def current(self) -> np.ndarray:
        """Renormalized elementwise mean of the window; uniform when empty."""
        return self._current

    def push(self, batch_mean: np.ndarray) -> None:
        bm = np.asarray(batch_mean, dtype=np.float64)
        if bm.shape != (self.num_classes,):
            raise ValueError("batch mean has wrong length")
        self.window.append(bm.copy())
        while len(self.window) > self.t:
            self.window.popleft()
        mean = np.mean(np.stack(self.window), axis=0)
        self._current = mean / mean.sum()


def update_running(rs: RunningSimilarity, batch_mean: np.ndarray) -> RunningSimilarity:
    rs.push(batch_mean)
    return rs


class LabeledKeyPool:
    """Per-class FIFO of momentum-encoder embeddings of labeled samples.

    Fed each step with the labeled batch's keys; class-c positives are served
    newest first. Bounded so stale keys from long-gone encoder versions age
    out.
    """

    def __init__(self, num_classes: int, cap_per_class: int = 64):
        if cap_per_class < 1:
            raise ValueError("cap_per_class must be >= 1")
        self.cap = cap_per_class
        self.pools: list[deque[np.ndarray]] = [
            deque(maxlen=cap_per_class) for _ in range(num_classes)
        ]

    def push(self, class_id: int, embedding: np.ndarray) -> None:
        self.pools[class_id].append(np.asarray(embedding, dtype=np.float64).copy())

    def newest_first(self, class_id: int) -> list[np.ndarray]:
        return list(reversed(self.pools[class_id]))


@dataclass
class CalibrationState:
    num_classes: int
    prototypes: list[Prototype] | None = None
    mixed_pool: list[list[Sample]] = field(default_factory=list)
    running: RunningSimilarity = None  # type: ignore[assignment]
    pseudo_cache: dict[int, PseudoRecord] = field(default_factory=dict)
    epoch_of_last_refresh: int = -1
    refresh_period: int = 5
    gamma_s: float = 5.0

    def __post_init__(self):
        if self.running is None:
            self.running = RunningSimilarity(self.num_classes)
        if not self.mixed_pool:
            self.mixed_pool = [[] for _ in range(self.num_classes)]


def compute_prototypes(
    labeled: list[list[Sample]],
    mixed_pool: list[list[Sample]],
    encode: Callable[[np.ndarray], np.ndarray],
) -> list[Prototype]:
    """Unit prototype per class from encoder features of labeled + mixed samples.

    Each support feature is normalized to a direction before averaging, so
    duplicating a support sample or rescaling one feature cannot move the
    prototype; the normalized mean realizes the normalizing constant of the
    class-mean definition.
    """
    protos: list[Prototype] = []
    for c, group in enumerate(labeled):
        support = list(group) + list(mixed_pool[c] if c < len(mixed_pool) else [])
        if not support:
            raise ValueError(f"class {c} has no support samples")
        feats = encode(np.stack([s.x for s in support]))
        dirs = np.stack([l2_normalize(f) for f in feats])
        protos.append(
            Prototype(class_id=c, vector=l2_normalize(dirs.mean(axis=0)), support_count=len(support))
        )
    return protos


def similarity_distribution(
    feature: np.ndarray,
    prototypes: list[Prototype],
    gamma_s: float = 5.0,
) -> np.ndarray:
    """Cosine similarities to all prototypes, bridged into a distribution.

    Raw cosines are not a probability vector, so they pass through a softmax
    at temperature 1/gamma_s; ordering of similarities is preserved.
    """
    if len(prototypes) < 2:
        raise ValueError("need at least 2 prototypes")
    sims = np.array([cosine_similarity(feature, p.vector) for p in prototypes])
    z = np.exp(gamma_s * sims - (gamma_s * sims).max())
    return z / z.sum()


def batch_similarity_mean(
    features: np.ndarray,
    prototypes: list[Prototype],
    gamma_s: float = 5.0,
) -> np.ndarray:
    """Mean similarity distribution over a feature batch (vectorized)."""
    proto_mat = np.stack([p.vector for p in prototypes])
    norms = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    sims = (features / norms) @ proto_mat.T
    return softmax_rows(gamma_s * sims).mean(axis=0)


def calibrate(p_b: np.ndarray, p_hat_s: np.ndarray) -> np.ndarray:
    """Rescale p_b elementwise by p_hat_s and renormalize.

    A uniform p_hat_s is short-circuited to the exact identity, which also
    keeps argmax and all probability ratios untouched.
    """
    pb = np.asarray(p_b, dtype=np.float64)
    ps = np.asarray(p_hat_s, dtype=np.float64)
    if pb.shape != ps.shape:
        raise ValueError("distribution length mismatch")
    ps = np.maximum(ps, CALIBRATION_FLOOR)
    if np.all(ps == ps[0]):
        return pb.copy()
    prod = pb * ps
    total = prod.sum()
    if total <= 0.0:
        raise ValueError("calibration collapse")
    return prod / total


def self_paced_weight(feature: np.ndarray, proto: Prototype) -> float:
    """Clamped cosine similarity to the assigned prototype, in [0, 1]."""
    return float(np.clip(cosine_similarity(feature, proto.vector), 0.0, 1.0))


def self_paced_weight_affine(feature: np.ndarray, proto: Prototype) -> float:
    """Affine alternative (1 + cos)/2: same ordering, floor at 0.5.

    Keeps even low-similarity positives partially in play, which damps the
    loss inflation a near-zero weight causes in the soft-min positive
    aggregate.
    """
    return float((1.0 + cosine_similarity(feature, proto.vector)) / 2.0)


def refresh_pseudo_labels(
    state: CalibrationState,
    unlabeled: list[Sample],
    forward_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    use_calibration: bool = True,
    alpha_form: str = "clamp",
) -> CalibrationState:
    """Recompute the pseudo cache for the whole unlabeled pool, atomically.

    forward_fn maps a clean (augmentation-free) input batch to (features,
    classifier logits) under the current query encoder. Each sample gets its
    calibrated distribution, argmax assignment, confidence, and self-paced
    weight against the assigned prototype.
    """
    if state.prototypes is None:
        raise ValueError("prototypes must be computed before a pseudo refresh")
    if alpha_form == "clamp":
        weight_fn = self_paced_weight
    elif alpha_form == "affine":
        weight_fn = self_paced_weight_affine
    else:
        raise ValueError(f"unknown alpha_form {alpha_form!r}")
    if not unlabeled:
        state.pseudo_cache = {}
        return state
    xs = np.stack([s.x for s in unlabeled])
    feats, logits = forward_fn(xs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    p_hat_s = state.running.current
    cache: dict[int, PseudoRecord] = {}
    for i, s in enumerate(unlabeled):
        target = calibrate(probs[i], p_hat_s) if use_calibration else probs[i].copy()
        assigned = int(np.argmax(target))
        cache[s.id] = PseudoRecord(
            assigned=assigned,
            confidence=float(target[assigned]),
            alpha=weight_fn(feats[i], state.prototypes[assigned]),
            target=target,
        )
    state.pseudo_cache = cache
    return state


def select_positives(
    u_id: int,
    state: CalibrationState,
    queue,
    labeled_pool: LabeledKeyPool | None,
    n_pos: int,
    instance_key: np.ndarray,
) -> list[np.ndarray]:
    """Key-side positives for one query: instance key plus class-c keys.

    The sample's own other-view key always comes first, so with n_pos=0 the
    loss degenerates to single-positive instance discrimination. Up to n_pos
    class positives follow, ground-truth labeled keys preferred, most recent
    first, drawing from the labeled pool and then class-tagged queue entries.
    """
    if u_id not in state.pseudo_cache:
        raise KeyError(f"stale pseudo cache: no entry for sample {u_id}")
    if n_pos < 0:
        raise ValueError("n_pos must be >= 0")
    c = state.pseudo_cache[u_id].assigned
    picks: list[np.ndarray] = [np.asarray(instance_key, dtype=np.float64)]
    if n_pos > 0 and labeled_pool is not None:
        for emb in labeled_pool.newest_first(c):
            if len(picks) - 1 >= n_pos:
                break
            picks.append(emb)
    if len(picks) - 1 < n_pos and len(queue) > 0:
        match = np.flatnonzero(queue.classes == c)
        for idx in match[::-1]:  # newest first
            if len(picks) - 1 >= n_pos:
                break
            picks.append(queue.embeddings[idx])
    return picks


def mix_pair(x_a: np.ndarray, x_b: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam * x_a + (1 - lam) * x_b."""
    return lam * x_a + (1.0 - lam) * x_b


def build_omega(
    state: CalibrationState,
    unlabeled_by_id: dict[int, Sample],
    caps: list[int],
) -> list[list[Sample]]:
    """Per-class confident-neighbor lists from the pseudo cache.

    Members assigned to class c ranked by confidence (ties broken by id for
    determinism), truncated to 5x the class's mixed-sample cap.
    """
    omega: list[list[Sample]] = [[] for _ in range(state.num_classes)]
    ranked: list[list[tuple[float, int]]] = [[] for _ in range(state.num_classes)]
    for sid, rec in state.pseudo_cache.items():
        ranked[rec.assigned].append((-rec.confidence, sid))
    for c in range(state.num_classes):
        ranked[c].sort()
        omega[c] = [unlabeled_by_id[sid] for _, sid in ranked[c][: 5 * caps[c]]]
    return omega


def refine_prototypes_mixup(
    state: CalibrationState,
    labeled: list[list[Sample]],
    omega: list[list[Sample]],
    alpha: float,
    caps: list[int],
    rng: np.random.Generator,
) -> CalibrationState:
    """Rebuild per-class mixed pools from labeled x confident-mined pairs.

    Each mixed sample is lam * x_c + (1-lam) * x_nearest with lam drawn from
    Beta(alpha, alpha); pools are replaced, never accumulated, and a class
    with no mined neighbors keeps an empty pool (prototype falls back to
    labeled support only). Mixed samples are tagged and used exclusively for
    prototype computation.
    """
    new_pools: list[list[Sample]] = []
    for c in range(state.num_classes):
        if not labeled[c]:
            raise ValueError(f"class {c} has no labeled samples")
        if not omega[c]:
            new_pools.append([])
            continue
        pool: list[Sample] = []
        for _ in range(caps[c]):
            lam = beta_sample(alpha, rng)
            x_c = labeled[c][int(rng.integers(len(labeled[c])))]
            x_n = omega[c][int(rng.integers(len(omega[c])))]
            pool.append(Sample(x=mix_pair(x_c.x, x_n.x, lam), y=c, id=-1, mixed=True))
        new_pools.append(pool)
    state.mixed_pool = new_pools
    return state


def dump_calibration(state: CalibrationState, path: str) -> None:
    """Debug dump: one line per prototype, one per cached pseudo label."""
    lines = [CALIB_DUMP_HEADER]
    for p in state.prototypes or []:
        vec = ",".join(f"{v:.9f}" for v in p.vector)
        lines.append(f"P,{p.class_id},{p.support_count},{vec}")
    for sid in sorted(state.pseudo_cache):
        rec = state.pseudo_cache[sid]
        lines.append(f"S,{sid},{rec.assigned},{rec.confidence:.9f},{rec.alpha:.9f}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
