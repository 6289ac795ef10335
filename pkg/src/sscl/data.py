"""Seeded synthetic datasets, labeled/unlabeled splits, and batch streams.

Datasets are immutable after construction. Ground-truth labels of the
unlabeled pool are retained for metric computation only, behind an audited
accessor: training code must never call it, and the read counter makes that
checkable. Everything here is bit-reproducible under a fixed seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SNAPSHOT_HEADER = "SSCL-DATA v1"


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int | None
    id: int
    mixed: bool = False  # synthetic mixup sample; prototype computation only


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    rotate: bool = False
    dropout_prob: float = 0.0

    def validate(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not (0 <= self.dropout_prob < 1):
            raise ValueError("dropout_prob must lie in [0, 1)")


@dataclass
class ViewPair:
    """Weak and strong views of the same source sample (shared id)."""

    weak: Sample
    strong: Sample

    @property
    def id(self) -> int:
        return self.weak.id


@dataclass
class Batch:
    labeled: list[Sample]
    unlabeled: list[ViewPair]


@dataclass
class Dataset:
    labeled: list[Sample]
    unlabeled: list[Sample]
    test: list[Sample]
    num_classes: int
    dim: int
    hidden: dict[int, int] = field(default_factory=dict)
    hidden_reads: int = 0

    def hidden_label(self, sample_id: int) -> int:
        """Audited accessor for ground truth of unlabeled samples.

        Metric evaluation only; the read counter must stay flat across any
        training operation.
        """
        self.hidden_reads += 1
        return self.hidden[sample_id]

    def labeled_by_class(self) -> list[list[Sample]]:
        groups: list[list[Sample]] = [[] for _ in range(self.num_classes)]
        for s in self.labeled:
            groups[s.y].append(s)
        return groups


def _stratified_split(
    per_class: list[np.ndarray],
    test_fraction: float,
    rng: np.random.Generator,
) -> tuple[list[Sample], list[Sample]]:
    """Split per-class sample blocks into train/test pools with fresh ids."""
    train: list[Sample] = []
    test: list[Sample] = []
    next_id = 0
    for c, block in enumerate(per_class):
        n = block.shape[0]
        n_test = max(1, int(round(n * test_fraction)))
        order = rng.permutation(n)
        for j, row in enumerate(order):
            s = Sample(x=block[row].copy(), y=c, id=next_id)
            next_id += 1
            (test if j < n_test else train).append(s)
    return train, test


def make_gaussian_mixture(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    class_sep: float,
    seed: int,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters at separated random means.

    Means are rejection-sampled inside a cube whose side scales with the
    class count; if the requested separation cannot be met there the geometry
    is declared infeasible. 20% of each class is held out as the test split.
    """
    if num_classes < 2 or dim < 2 or samples_per_class < 10 or class_sep <= 0:
        raise ValueError("invalid gaussian mixture request")
    rng = np.random.default_rng(seed)
    side = class_sep * max(2.0, 1.5 * num_classes ** (1.0 / dim))
    means = None
    for _ in range(500):
        cand = rng.uniform(-side / 2, side / 2, size=(num_classes, dim))
        diff = cand[:, None, :] - cand[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= class_sep:
            means = cand
            break
    if means is None:
        raise ValueError(
            f"infeasible geometry: cannot place {num_classes} means at "
            f"separation {class_sep} in dimension {dim}"
        )
    blocks = [
        means[c] + rng.standard_normal((samples_per_class, dim))
        for c in range(num_classes)
    ]
    train, test = _stratified_split(blocks, 0.2, rng)
    return Dataset(labeled=train, unlabeled=[], test=test, num_classes=num_classes, dim=dim)


def make_two_moons(samples: int, noise: float, seed: int) -> Dataset:
    """Two interleaved unit arcs in 2-D with optional Gaussian jitter."""
    if samples < 100 or noise < 0:
        raise ValueError("invalid two-moons request")
    rng = np.random.default_rng(seed)
    n_out = samples - samples // 2
    n_in = samples // 2
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)])
    if noise > 0:
        outer = outer + noise * rng.standard_normal(outer.shape)
        inner = inner + noise * rng.standard_normal(inner.shape)
    train, test = _stratified_split([outer, inner], 0.2, rng)
    return Dataset(labeled=train, unlabeled=[], test=test, num_classes=2, dim=2)


def split_labeled(ds: Dataset, labels_per_class: int, seed: int) -> Dataset:
    """Keep labels_per_class labeled samples per class; hide the rest.

    Selection is seeded per class; the demoted samples keep their features
    and id but lose the visible label, retaining ground truth only in the
    audited hidden map. The test split is untouched.
    """
    if labels_per_class < 1:
        raise ValueError("labels_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    keep_ids: set[int] = set()
    for c, group in enumerate(ds.labeled_by_class()):
        if len(group) < labels_per_class:
            raise ValueError(
                f"class {c} has only {len(group)} labeled samples, "
                f"need {labels_per_class}"
            )
        chosen = rng.choice(len(group), size=labels_per_class, replace=False)
        keep_ids.update(group[i].id for i in chosen)
    labeled: list[Sample] = []
    unlabeled: list[Sample] = []
    hidden = dict(ds.hidden)
    for s in ds.labeled:
        if s.id in keep_ids:
            labeled.append(s)
        else:
            hidden[s.id] = s.y
            unlabeled.append(replace(s, y=None))
    return Dataset(
        labeled=labeled,
        unlabeled=unlabeled,
        test=list(ds.test),
        num_classes=ds.num_classes,
        dim=ds.dim,
        hidden=hidden,
    )


def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Vector-space augmentation: rotate pairs, scale, add noise, drop coords.

    Draw order is fixed (angle if rotation enabled, then scale, noise vector,
    dropout mask) so augmented streams are reproducible.
    """
    x = s.x.astype(np.float64).copy()
    d = x.size
    if cfg.rotate:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        c, sn = np.cos(theta), np.sin(theta)
        for i in range(0, d - 1, 2):
            a, b = x[i], x[i + 1]
            x[i] = c * a - sn * b
            x[i + 1] = sn * a + c * b
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    x = x * scale
    x = x + cfg.noise_sigma * rng.standard_normal(d)
    u = rng.random(d)
    x = np.where(u >= cfg.dropout_prob, x, 0.0)
    return replace(s, x=x)


def augment_batch(xs: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Batched augmentation with one vectorized draw per stage.

    Same per-sample semantics as augment (one rotation angle, one scale, a
    noise vector and a dropout mask per row) but a different, batch-level
    draw order; streams remain deterministic per generator state.
    """
    x = np.array(xs, dtype=np.float64)
    n, d = x.shape
    if cfg.rotate:
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        c, sn = np.cos(theta)[:, None], np.sin(theta)[:, None]
        a = x[:, 0 : d - 1 : 2]
        b = x[:, 1:d:2]
        x[:, 0 : d - 1 : 2] = c * a - sn * b
        x[:, 1:d:2] = sn * a + c * b
    x *= rng.uniform(cfg.scale_range[0], cfg.scale_range[1], n)[:, None]
    x += cfg.noise_sigma * rng.standard_normal((n, d))
    u = rng.random((n, d))
    return np.where(u >= cfg.dropout_prob, x, 0.0)


class BatchStream:
    """Seeded epoch-by-epoch batch producer in the B / mu*B regime.

    Each epoch reshuffles both pools; the labeled pool cycles (with
    reshuffling) if it runs out before the unlabeled pool, and the final
    partial unlabeled batch is dropped so batch shapes stay exact. When the
    unlabeled pool is empty the stream degrades to labeled-only batches.
    """

    def __init__(
        self,
        ds: Dataset,
        batch_size: int,
        mu: int,
        weak: AugmentConfig,
        strong: AugmentConfig,
        seed: int,
        labeled_view: str = "weak",
    ):
        if batch_size < 1 or mu < 1:
            raise ValueError("batch_size and mu must be >= 1")
        if not ds.labeled:
            raise ValueError("labeled pool is empty")
        weak.validate()
        strong.validate()
        if labeled_view not in ("weak", "strong"):
            raise ValueError("labeled_view must be 'weak' or 'strong'")
        self.ds = ds
        self.batch_size = batch_size
        self.mu = mu
        self.weak = weak
        self.strong = strong
        self.labeled_cfg = weak if labeled_view == "weak" else strong
        self.rng = np.random.default_rng(seed)
        self._lab_x = np.stack([s.x for s in ds.labeled])
        self._lab_y = np.array([s.y for s in ds.labeled])
        self._lab_id = np.array([s.id for s in ds.labeled])
        if ds.unlabeled:
            self._unl_x = np.stack([s.x for s in ds.unlabeled])
            self._unl_id = np.array([s.id for s in ds.unlabeled])
        else:
            self._unl_x = np.zeros((0, ds.dim))
            self._unl_id = np.zeros(0, dtype=np.int64)

    def batches_per_epoch(self) -> int:
        if self.ds.unlabeled:
            return len(self.ds.unlabeled) // (self.mu * self.batch_size)
        return len(self.ds.labeled) // self.batch_size

    def _labeled_indices(self, count: int) -> np.ndarray:
        """count labeled indices, reshuffling whenever the pool is exhausted."""
        if count == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        need = count
        while need > 0:
            perm = self.rng.permutation(len(self.ds.labeled))
            take = min(need, perm.size)
            out.append(perm[:take])
            need -= take
        return np.concatenate(out)

    def epoch(self) -> list[Batch]:
        rng = self.rng
        n_batches = self.batches_per_epoch()
        batches: list[Batch] = []
        if self.ds.unlabeled:
            chunk = self.mu * self.batch_size
            lab_idx = self._labeled_indices(n_batches * self.batch_size)
            unl_perm = rng.permutation(len(self.ds.unlabeled))
            for b in range(n_batches):
                li = lab_idx[b * self.batch_size : (b + 1) * self.batch_size]
                lab_views = augment_batch(self._lab_x[li], self.labeled_cfg, rng)
                labeled = [
                    Sample(x=lab_views[j], y=int(self._lab_y[i]), id=int(self._lab_id[i]))
                    for j, i in enumerate(li)
                ]
                ui = unl_perm[b * chunk : (b + 1) * chunk]
                weak_views = augment_batch(self._unl_x[ui], self.weak, rng)
                strong_views = augment_batch(self._unl_x[ui], self.strong, rng)
                pairs = [
                    ViewPair(
                        weak=Sample(x=weak_views[j], y=None, id=int(self._unl_id[i])),
                        strong=Sample(x=strong_views[j], y=None, id=int(self._unl_id[i])),
                    )
                    for j, i in enumerate(ui)
                ]
                batches.append(Batch(labeled=labeled, unlabeled=pairs))
        else:
            lab_idx = self._labeled_indices(n_batches * self.batch_size)
            for b in range(n_batches):
                li = lab_idx[b * self.batch_size : (b + 1) * self.batch_size]
                lab_views = augment_batch(self._lab_x[li], self.labeled_cfg, rng)
                labeled = [
                    Sample(x=lab_views[j], y=int(self._lab_y[i]), id=int(self._lab_id[i]))
                    for j, i in enumerate(li)
                ]
                batches.append(Batch(labeled=labeled, unlabeled=[]))
        return batches

    def get_rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def batch_iterator(
    ds: Dataset,
    batch_size: int,
    mu: int,
    weak: AugmentConfig,
    strong: AugmentConfig,
    seed: int,
    epochs: int = 1,
    labeled_view: str = "weak",
):
    """Generator over batches for the given number of epochs."""
    stream = BatchStream(ds, batch_size, mu, weak, strong, seed, labeled_view)
    for _ in range(epochs):
        yield from stream.epoch()


def save_snapshot(ds: Dataset, path: str) -> None:
    """Write the versioned delimited snapshot; floats use repr round-tripping.

    Unlabeled rows carry the hidden ground-truth class (or -1 when absent) so
    a load reproduces the dataset, including metric capability, bit-exactly.
    """
    lines = [SNAPSHOT_HEADER]
    for pool_tag, pool in (("L", ds.labeled), ("U", ds.unlabeled), ("T", ds.test)):
        for s in pool:
            if pool_tag == "U":
                cls = ds.hidden.get(s.id, -1)
            else:
                cls = s.y
            coords = ",".join(repr(float(v)) for v in s.x)
            lines.append(f"{s.id},{pool_tag},{cls},{coords}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SNAPSHOT_HEADER:
        raise ValueError(f"not a {SNAPSHOT_HEADER} snapshot: {path}")
    labeled: list[Sample] = []
    unlabeled: list[Sample] = []
    test: list[Sample] = []
    hidden: dict[int, int] = {}
    max_class = -1
    dim = 0
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 4:
            raise ValueError(f"line {ln}: malformed record")
        sid, pool_tag, cls = int(parts[0]), parts[1], int(parts[2])
        x = np.array([float(v) for v in parts[3:]], dtype=np.float64)
        dim = x.size
        if pool_tag == "L":
            labeled.append(Sample(x=x, y=cls, id=sid))
            max_class = max(max_class, cls)
        elif pool_tag == "U":
            unlabeled.append(Sample(x=x, y=None, id=sid))
            if cls >= 0:
                hidden[sid] = cls
                max_class = max(max_class, cls)
        elif pool_tag == "T":
            test.append(Sample(x=x, y=cls, id=sid))
            max_class = max(max_class, cls)
        else:
            raise ValueError(f"line {ln}: unknown pool tag {pool_tag!r}")
    return Dataset(
        labeled=labeled,
        unlabeled=unlabeled,
        test=test,
        num_classes=max_class + 1,
        dim=dim,
        hidden=hidden,
    )
