"""End-to-end training loop: SGD with momentum, cosine decay, periodic
co-calibration refresh, and the evaluation metrics reported per epoch.

The loop is strictly sequential and bit-reproducible: every stochastic
component (dataset, split, init, batch stream, mixup) draws from its own
generator derived from the run seed, so ablation toggles never perturb the
batch stream, and run state can be checkpointed and resumed exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import cocalibration as cc
from . import encoder as enc
from .data import AugmentConfig, Batch, BatchStream, Dataset, make_gaussian_mixture, make_two_moons, split_labeled
from .losses import ContrastiveInputs, LossWeights, contrastive_loss, pseudo_label_loss, sup_loss, total_loss

RUNSTATE_VERSION = "SSCL-RUN v1"

METRICS_HEADER = (
    "epoch,loss_sup,loss_pl,loss_ctr,kept_frac,top1,"
    "pl_acc,proto_acc,overlap,intra_sim,pos_sel_acc"
)


@dataclass
class DataSpec:
    kind: str = "gaussian"          # "gaussian" | "moons"
    num_classes: int = 8
    dim: int = 8
    samples_per_class: int = 625
    class_sep: float = 2.75
    moon_samples: int = 1200
    moon_noise: float = 0.1
    labels_per_class: int = 5


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    mu: int = 4
    tau: float = 0.95
    gamma: float = 10.0
    margin: float = -0.25
    lambda_pl: float = 1.0
    lambda_ctr: float = 3.0
    n_pos: int = 3
    queue_size: int = 512
    momentum_m: float = 0.99        # key-encoder momentum
    refresh_period: int = 2
    t_window: int = 128
    gamma_s: float = 5.0
    lr0: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    calibration: bool = True
    self_paced: bool = True
    alpha_form: str = "affine"      # "affine" | "clamp"
    mixture: bool = True
    mixup_alpha: float = 1.0
    labeled_key_cap: int = 64
    labeled_aug: str = "weak"
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    weak: AugmentConfig = field(default_factory=lambda: AugmentConfig(noise_sigma=0.05))
    strong: AugmentConfig = field(
        default_factory=lambda: AugmentConfig(noise_sigma=0.2, rotate=True, dropout_prob=0.1)
    )


@dataclass
class RunMetrics:
    epoch: int
    loss_sup: float
    loss_pl: float
    loss_ctr: float
    kept_frac: float
    top1: float
    pl_acc: float
    proto_acc: float
    overlap: float
    intra_sim: float
    pos_sel_acc: float

    def as_row(self) -> list[float]:
        return [
            self.epoch, self.loss_sup, self.loss_pl, self.loss_ctr, self.kept_frac,
            self.top1, self.pl_acc, self.proto_acc, self.overlap, self.intra_sim,
            self.pos_sel_acc,
        ]


@dataclass
class OptimizerState:
    velocity: enc.EncoderParams
    lr0: float
    momentum: float
    weight_decay: float


def sgd_step(
    params: enc.EncoderParams,
    grads: enc.EncoderParams,
    opt: OptimizerState,
    lr: float,
) -> tuple[enc.EncoderParams, OptimizerState]:
    """Classical momentum SGD with L2 regularization folded into the gradient.

    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    Velocity updates even at lr=0.
    """
    new_pairs = []
    vel_pairs = []
    for ((w, b), (gw, gb)), (vw, vb) in zip(
        enc._zip_pairs(params, grads), opt.velocity.pairs()
    ):
        nvw = opt.momentum * vw + gw + opt.weight_decay * w
        nvb = opt.momentum * vb + gb + opt.weight_decay * b
        new_pairs.append((w - lr * nvw, b - lr * nvb))
        vel_pairs.append((nvw, nvb))
    new_params = enc._rebuild(params, new_pairs)
    new_opt = OptimizerState(
        velocity=enc._rebuild(params, vel_pairs),
        lr0=opt.lr0, momentum=opt.momentum, weight_decay=opt.weight_decay,
    )
    return new_params, new_opt


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * epoch / total)), epoch in [0, total)."""
    if not (0 <= epoch < total):
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * epoch / total)))


@dataclass
class TrainerState:
    cfg: TrainConfig
    ds: Dataset
    params_q: enc.EncoderParams
    params_k: enc.EncoderParams
    opt: OptimizerState
    queue: enc.KeyQueue
    labeled_pool: cc.LabeledKeyPool
    calib: cc.CalibrationState
    stream: BatchStream
    mixup_rng: np.random.Generator
    epoch: int = 0
    history: list[RunMetrics] = field(default_factory=list)
    labeled_groups: list = field(default=None)  # type: ignore[assignment]
    unlabeled_by_id: dict = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.labeled_groups is None:
            self.labeled_groups = self.ds.labeled_by_class()
        if self.unlabeled_by_id is None:
            self.unlabeled_by_id = {s.id: s for s in self.ds.unlabeled}


def build_dataset(spec: DataSpec, data_seed: int, split_seed: int) -> Dataset:
    if spec.kind == "gaussian":
        ds = make_gaussian_mixture(
            spec.num_classes, spec.dim, spec.samples_per_class, spec.class_sep, data_seed
        )
    elif spec.kind == "moons":
        ds = make_two_moons(spec.moon_samples, spec.moon_noise, data_seed)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    return split_labeled(ds, spec.labels_per_class, split_seed)


def derive_seeds(seed: int) -> dict[str, int]:
    s = np.random.SeedSequence(seed).generate_state(5)
    return {
        "data": int(s[0]),
        "split": int(s[1]),
        "init": int(s[2]),
        "batch": int(s[3]),
        "mixup": int(s[4]),
    }


def init_trainer(cfg: TrainConfig) -> TrainerState:
    seeds = derive_seeds(cfg.seed)
    ds = build_dataset(cfg.data, seeds["data"], seeds["split"])
    dims = [ds.dim, *cfg.hidden]
    params_q = enc.init_params(dims, ds.num_classes, cfg.embed_dim, seeds["init"])
    params_k = enc.copy_params(params_q)
    opt = OptimizerState(
        velocity=enc.zeros_like_params(params_q),
        lr0=cfg.lr0, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay,
    )
    queue = enc.KeyQueue(capacity=cfg.queue_size)
    labeled_pool = cc.LabeledKeyPool(ds.num_classes, cfg.labeled_key_cap)
    calib = cc.CalibrationState(
        num_classes=ds.num_classes,
        running=cc.RunningSimilarity(ds.num_classes, cfg.t_window),
        refresh_period=cfg.refresh_period,
        gamma_s=cfg.gamma_s,
    )
    stream = BatchStream(
        ds, cfg.batch_size, cfg.mu, cfg.weak, cfg.strong, seeds["batch"], cfg.labeled_aug
    )
    mixup_rng = np.random.default_rng(seeds["mixup"])
    return TrainerState(
        cfg=cfg, ds=ds, params_q=params_q, params_k=params_k, opt=opt,
        queue=queue, labeled_pool=labeled_pool, calib=calib, stream=stream,
        mixup_rng=mixup_rng,
    )


def _encode_features(params: enc.EncoderParams):
    def fn(xs: np.ndarray) -> np.ndarray:
        return enc.forward(params, xs)[0]
    return fn


def _forward_head(params: enc.EncoderParams):
    def fn(xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        features, logits, _, _ = enc.forward(params, xs)
        return features, logits
    return fn


def run_refresh(st: TrainerState) -> None:
    """Mixup pool -> prototypes -> pseudo labels, in that order."""
    cfg = st.cfg
    caps = [len(g) for g in st.labeled_groups]
    if cfg.mixture and st.calib.pseudo_cache:
        omega = cc.build_omega(st.calib, st.unlabeled_by_id, caps)
        cc.refine_prototypes_mixup(
            st.calib, st.labeled_groups, omega, cfg.mixup_alpha, caps, st.mixup_rng
        )
    else:
        st.calib.mixed_pool = [[] for _ in range(st.ds.num_classes)]
    st.calib.prototypes = cc.compute_prototypes(
        st.labeled_groups, st.calib.mixed_pool, _encode_features(st.params_q)
    )
    cc.refresh_pseudo_labels(
        st.calib, st.ds.unlabeled, _forward_head(st.params_q),
        use_calibration=cfg.calibration, alpha_form=cfg.alpha_form,
    )
    st.calib.epoch_of_last_refresh = st.epoch


def train_step(st: TrainerState, batch: Batch, lr: float) -> tuple[float, float, float, int]:
    """One optimization step; returns (sup, pl, ctr) loss values and kept count.

    Labeled weak views train the classifier; unlabeled strong views train
    both heads (pseudo-label CE on the classifier, contrastive on the
    embedding); unlabeled weak views pass through the key encoder to produce
    the instance positives and the new queue keys. Key-side streams never
    receive gradients.
    """
    cfg = st.cfg
    assert all(not s.mixed for s in batch.labeled), "mixed sample leaked into a batch"

    # supervised term on labeled views
    x_lab = np.stack([s.x for s in batch.labeled])
    y_lab = [s.y for s in batch.labeled]
    _, logits_lab, _, cache_lab = enc.forward(st.params_q, x_lab)
    sup_v, sup_g = sup_loss(y_lab, logits_lab)

    n_u = len(batch.unlabeled)
    pl_v, ctr_v, kept = 0.0, 0.0, 0
    cache_u = None
    pl_g = np.zeros((0, st.ds.num_classes))
    grad_emb_u = np.zeros((0, cfg.embed_dim))
    keys_weak = None

    if n_u:
        assert all(not p.weak.mixed and not p.strong.mixed for p in batch.unlabeled)
        x_strong = np.stack([p.strong.x for p in batch.unlabeled])
        _, logits_u, emb_u, cache_u = enc.forward(st.params_q, x_strong)
        targets = np.stack([st.calib.pseudo_cache[p.id].target for p in batch.unlabeled])
        pl_v, pl_g, kept = pseudo_label_loss(targets, cfg.tau, logits_u)

        # key-side streams (stop-gradient): labeled keys feed the positive
        # pool, unlabeled weak keys are the instance positives / new negatives
        x_weak = np.stack([p.weak.x for p in batch.unlabeled])
        _, _, keys_lab, _ = enc.forward(st.params_k, x_lab)
        for s, k in zip(batch.labeled, keys_lab):
            st.labeled_pool.push(s.y, k)
        _, _, keys_weak, _ = enc.forward(st.params_k, x_weak)

        grad_emb_u = np.zeros_like(emb_u)
        if cfg.lambda_ctr != 0.0:
            s_n_all = emb_u @ st.queue.embeddings.T if len(st.queue) else None
            for i, pair in enumerate(batch.unlabeled):
                if s_n_all is None:
                    continue
                neg_mask = st.queue.ids != pair.id
                if not neg_mask.any():
                    continue
                rec = st.calib.pseudo_cache[pair.id]
                positives = cc.select_positives(
                    pair.id, st.calib, st.queue, st.labeled_pool, cfg.n_pos, keys_weak[i]
                )
                pos_mat = np.stack(positives)
                alphas = np.ones(len(positives))
                if cfg.self_paced:
                    alphas[1:] = rec.alpha
                out = contrastive_loss(ContrastiveInputs(
                    s_p=pos_mat @ emb_u[i],
                    alpha_p=alphas,
                    s_n=s_n_all[i][neg_mask],
                    gamma=cfg.gamma,
                    margin=cfg.margin,
                ))
                ctr_v += out.value
                grad_emb_u[i] = (
                    pos_mat.T @ out.grad_sp
                    + st.queue.embeddings[neg_mask].T @ out.grad_sn
                )
            ctr_v /= n_u
            grad_emb_u = grad_emb_u / n_u

    weights = LossWeights(cfg.lambda_pl, cfg.lambda_ctr)
    value, g_logits_lab, g_logits_u, g_emb_u = total_loss(
        (sup_v, sup_g), (pl_v, pl_g), (ctr_v, grad_emb_u), weights
    )
    assert np.isfinite(value), "non-finite loss"

    grads = enc.backward(
        st.params_q, cache_lab, g_logits_lab, np.zeros_like(cache_lab.embeddings)
    )
    if n_u:
        grads = enc.add_params(
            grads, enc.backward(st.params_q, cache_u, g_logits_u, g_emb_u)
        )
    st.params_q, st.opt = sgd_step(st.params_q, grads, st.opt, lr)
    st.params_k = enc.momentum_update(st.params_k, st.params_q, cfg.momentum_m)

    if n_u:
        st.queue.push([
            (keys_weak[i], None, pair.id) for i, pair in enumerate(batch.unlabeled)
        ])
        if st.calib.prototypes is not None:
            feats_w = enc.forward(st.params_q, x_weak)[0]
            cc.update_running(
                st.calib.running,
                cc.batch_similarity_mean(feats_w, st.calib.prototypes, cfg.gamma_s),
            )
    return sup_v, pl_v, ctr_v, kept


def intra_class_similarity(embeddings: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean over classes of mean pairwise cosine among same-class unit embeddings."""
    sims = []
    for c in range(num_classes):
        e = embeddings[labels == c]
        n = e.shape[0]
        if n >= 2:
            gram = e @ e.T
            sims.append((gram.sum() - np.trace(gram)) / (n * (n - 1)))
    return float(np.mean(sims)) if sims else 0.0


def evaluate(st: TrainerState) -> dict[str, float]:
    """Metrics over frozen state: test top-1 and intra-class similarity, plus
    unlabeled-pool diagnostics (pseudo-label / nearest-prototype accuracy,
    overlap of their correct sets, positive-selection accuracy)."""
    ds = st.ds
    x_test = np.stack([s.x for s in ds.test])
    y_test = np.array([s.y for s in ds.test])
    _, logits_t, emb_t, _ = enc.forward(st.params_q, x_test)
    top1 = float(np.mean(np.argmax(logits_t, axis=1) == y_test))
    intra = intra_class_similarity(emb_t, y_test, ds.num_classes)

    pl_acc = proto_acc = overlap = pos_sel = 0.0
    if ds.unlabeled and st.calib.prototypes is not None:
        x_u = np.stack([s.x for s in ds.unlabeled])
        feats_u, logits_u, _, _ = enc.forward(st.params_q, x_u)
        truth = np.array([ds.hidden_label(s.id) for s in ds.unlabeled])
        fc_pred = np.argmax(logits_u, axis=1)
        proto_mat = np.stack([p.vector for p in st.calib.prototypes])
        proto_pred = np.argmax(feats_u @ proto_mat.T, axis=1)
        cached = np.array([st.calib.pseudo_cache[s.id].assigned for s in ds.unlabeled])

        fc_ok = fc_pred == truth
        proto_ok = proto_pred == truth
        union = np.logical_or(fc_ok, proto_ok).sum()
        inter = np.logical_and(fc_ok, proto_ok).sum()
        overlap = float(inter / union) if union else 1.0
        pl_acc = float(np.mean(cached == truth))
        proto_acc = float(np.mean(proto_ok))
        # the cached assignment is exactly what select_positives keys on
        pos_sel = float(np.mean(cached == truth))
    return {
        "top1": top1, "pl_acc": pl_acc, "proto_acc": proto_acc,
        "overlap": overlap, "intra_sim": intra, "pos_sel_acc": pos_sel,
    }


def run_experiment(
    cfg: TrainConfig,
    resume: TrainerState | None = None,
    stop_after: int | None = None,
) -> tuple[list[RunMetrics], TrainerState]:
    """Full training loop; refresh runs before any epoch divisible by the
    refresh period (including epoch 0, using the freshly initialized
    encoders). Returns per-epoch metrics and the final state."""
    st = resume if resume is not None else init_trainer(cfg)
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    while st.epoch < last:
        if st.epoch % cfg.refresh_period == 0:
            run_refresh(st)
        lr = cosine_lr(st.epoch, cfg.epochs, cfg.lr0)
        reads_before = st.ds.hidden_reads
        sums = np.zeros(3)
        kept_total = 0
        entries_total = 0
        n_batches = 0
        for batch in st.stream.epoch():
            sup_v, pl_v, ctr_v, kept = train_step(st, batch, lr)
            sums += (sup_v, pl_v, ctr_v)
            kept_total += kept
            entries_total += len(batch.unlabeled)
            n_batches += 1
        assert st.ds.hidden_reads == reads_before, "training read a hidden label"
        mets = evaluate(st)
        denom = max(n_batches, 1)
        st.history.append(RunMetrics(
            epoch=st.epoch,
            loss_sup=sums[0] / denom,
            loss_pl=sums[1] / denom,
            loss_ctr=sums[2] / denom,
            kept_frac=kept_total / entries_total if entries_total else 0.0,
            **mets,
        ))
        st.epoch += 1
    return list(st.history), st


def metrics_csv(history: list[RunMetrics]) -> str:
    lines = [METRICS_HEADER]
    for m in history:
        row = m.as_row()
        lines.append(str(int(row[0])) + "," + ",".join(f"{v:.6f}" for v in row[1:]))
    return "\n".join(lines) + "\n"


def write_metrics_csv(history: list[RunMetrics], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_csv(history))


def save_run_state(path: str, st: TrainerState) -> None:
    """Checkpoint the complete run state (epoch-boundary resume is exact)."""
    arrays: dict[str, np.ndarray] = {}
    arrays.update(enc.params_to_arrays(st.params_q, "q"))
    arrays.update(enc.params_to_arrays(st.params_k, "k"))
    arrays.update(enc.params_to_arrays(st.opt.velocity, "v"))
    arrays["queue_emb"] = st.queue.embeddings
    arrays["queue_cls"] = st.queue.classes
    arrays["queue_ids"] = st.queue.ids
    for c, pool in enumerate(st.labeled_pool.pools):
        arrays[f"lkp{c}"] = (
            np.stack(list(pool)) if pool else np.zeros((0, st.cfg.embed_dim))
        )
    calib = st.calib
    has_protos = calib.prototypes is not None
    if has_protos:
        arrays["proto_mat"] = np.stack([p.vector for p in calib.prototypes])
        arrays["proto_support"] = np.array(
            [p.support_count for p in calib.prototypes], dtype=np.int64
        )
    for c, pool in enumerate(calib.mixed_pool):
        arrays[f"mix{c}"] = (
            np.stack([s.x for s in pool]) if pool else np.zeros((0, st.ds.dim))
        )
    arrays["running_window"] = (
        np.stack(list(calib.running.window))
        if calib.running.window else np.zeros((0, st.ds.num_classes))
    )
    cache_ids = sorted(calib.pseudo_cache)
    arrays["cache_ids"] = np.array(cache_ids, dtype=np.int64)
    arrays["cache_assigned"] = np.array(
        [calib.pseudo_cache[i].assigned for i in cache_ids], dtype=np.int64
    )
    arrays["cache_conf"] = np.array([calib.pseudo_cache[i].confidence for i in cache_ids])
    arrays["cache_alpha"] = np.array([calib.pseudo_cache[i].alpha for i in cache_ids])
    arrays["cache_targets"] = (
        np.stack([calib.pseudo_cache[i].target for i in cache_ids])
        if cache_ids else np.zeros((0, st.ds.num_classes))
    )
    arrays["history"] = (
        np.array([m.as_row() for m in st.history])
        if st.history else np.zeros((0, 11))
    )
    meta = {
        "version": RUNSTATE_VERSION,
        "epoch": st.epoch,
        "epoch_of_last_refresh": calib.epoch_of_last_refresh,
        "has_protos": has_protos,
        "queue_capacity": st.queue.capacity,
        "stream_rng": st.stream.get_rng_state(),
        "mixup_rng": st.mixup_rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_run_state(path: str, cfg: TrainConfig) -> TrainerState:
    """Rebuild a TrainerState saved by save_run_state under the same config."""
    st = init_trainer(cfg)
    with np.load(path) as d:
        meta = json.loads(bytes(d["meta"]).decode("utf-8"))
        if meta.get("version") != RUNSTATE_VERSION:
            raise ValueError(f"unsupported run-state version in {path}")
        st.params_q = enc.params_from_arrays(d, "q")
        st.params_k = enc.params_from_arrays(d, "k")
        st.opt.velocity = enc.params_from_arrays(d, "v")
        st.queue = enc.KeyQueue(
            capacity=int(meta["queue_capacity"]),
            embeddings=np.array(d["queue_emb"]),
            classes=np.array(d["queue_cls"]),
            ids=np.array(d["queue_ids"]),
        )
        for c in range(st.ds.num_classes):
            block = np.array(d[f"lkp{c}"])
            for row in block:
                st.labeled_pool.pools[c].append(row.copy())
        if meta["has_protos"]:
            mat = np.array(d["proto_mat"])
            sup = np.array(d["proto_support"])
            st.calib.prototypes = [
                cc.Prototype(class_id=c, vector=mat[c], support_count=int(sup[c]))
                for c in range(mat.shape[0])
            ]
        st.calib.mixed_pool = []
        from .data import Sample
        for c in range(st.ds.num_classes):
            block = np.array(d[f"mix{c}"])
            st.calib.mixed_pool.append(
                [Sample(x=row.copy(), y=c, id=-1, mixed=True) for row in block]
            )
        window = np.array(d["running_window"])
        for row in window:
            st.calib.running.push(row)
        ids = np.array(d["cache_ids"])
        assigned = np.array(d["cache_assigned"])
        conf = np.array(d["cache_conf"])
        alpha = np.array(d["cache_alpha"])
        targets = np.array(d["cache_targets"])
        st.calib.pseudo_cache = {
            int(ids[i]): cc.PseudoRecord(
                assigned=int(assigned[i]), confidence=float(conf[i]),
                alpha=float(alpha[i]), target=targets[i].copy(),
            )
            for i in range(ids.shape[0])
        }
        st.calib.epoch_of_last_refresh = int(meta["epoch_of_last_refresh"])
        st.epoch = int(meta["epoch"])
        hist = np.array(d["history"])
        st.history = [
            RunMetrics(int(r[0]), *[float(v) for v in r[1:]]) for r in hist
        ]
        st.stream.set_rng_state(meta["stream_rng"])
        st.mixup_rng.bit_generator.state = meta["mixup_rng"]
    return st
