"""MLP backbone with classifier and projection heads, written by hand.

Forward passes cache every intermediate needed by the exact analytic
backward pass; no autodiff framework is involved. The module also owns the
momentum (key) encoder update and the FIFO queue of negative keys, and the
bit-exact checkpoint dump of both encoders, queue, and optimizer velocity.

Backbone layers are affine with ReLU between them; the final backbone layer
is linear and its output is the feature vector. The classifier head consumes
features; the projection head is a small MLP whose output is L2-normalized
into the embedding.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = "SSCL-CKPT v1"

ParamPair = tuple[np.ndarray, np.ndarray]


@dataclass
class EncoderParams:
    layers: list[ParamPair]
    classifier: ParamPair
    projection: list[ParamPair]

    def pairs(self) -> list[ParamPair]:
        return [*self.layers, self.classifier, *self.projection]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.pairs())


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]        # backbone pre-activations
    acts: list[np.ndarray]       # backbone post-activations (last = features)
    proj_pre: list[np.ndarray]
    proj_acts: list[np.ndarray]
    norms: np.ndarray            # row norms of the raw projection output
    embeddings: np.ndarray


def init_params(dims: list[int], num_classes: int, embed_dim: int, seed: int) -> EncoderParams:
    """He-style fan-in scaled uniform weights, zero biases, seeded.

    dims chains input through hidden layers to the feature width; the
    projection head is [feature, feature, embed_dim].
    """
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError("dims must chain at least input -> feature")
    if num_classes < 2 or embed_dim < 2:
        raise ValueError("need num_classes >= 2 and embed_dim >= 2")
    rng = np.random.default_rng(seed)

    def layer(n_in: int, n_out: int) -> ParamPair:
        bound = np.sqrt(6.0 / n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        return w, np.zeros(n_out)

    layers = [layer(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    feat = dims[-1]
    classifier = layer(feat, num_classes)
    projection = [layer(feat, feat), layer(feat, embed_dim)]
    return EncoderParams(layers=layers, classifier=classifier, projection=projection)


def forward(p: EncoderParams, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, ForwardCache]:
    """Batch forward: features, logits, unit embeddings, and the cache."""
    x = np.asarray(xs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.layers[0][0].shape[1]:
        raise ValueError(
            f"input shape {x.shape} does not match first layer "
            f"fan-in {p.layers[0][0].shape[1]}"
        )
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    h = x
    last = len(p.layers) - 1
    for i, (w, b) in enumerate(p.layers):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    features = h
    wc, bc = p.classifier
    logits = features @ wc.T + bc

    proj_pre: list[np.ndarray] = []
    proj_acts: list[np.ndarray] = []
    ph = features
    plast = len(p.projection) - 1
    for i, (w, b) in enumerate(p.projection):
        z = ph @ w.T + b
        proj_pre.append(z)
        ph = z if i == plast else np.maximum(z, 0.0)
        proj_acts.append(ph)
    raw = ph
    norms = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    embeddings = raw / norms
    cache = ForwardCache(
        inputs=x, pre=pre, acts=acts,
        proj_pre=proj_pre, proj_acts=proj_acts,
        norms=norms, embeddings=embeddings,
    )
    return features, logits, embeddings, cache


def backward(
    p: EncoderParams,
    cache: ForwardCache,
    grad_logits: np.ndarray,
    grad_embeddings: np.ndarray,
) -> EncoderParams:
    """Exact gradients of a scalar loss, given its upstream gradients.

    Both head streams are chained into the shared backbone; the embedding
    stream passes through the L2-normalization Jacobian. Either stream may be
    all-zero. The returned container mirrors EncoderParams shapes.
    """
    gl = np.asarray(grad_logits, dtype=np.float64)
    ge = np.asarray(grad_embeddings, dtype=np.float64)
    n = cache.inputs.shape[0]
    if gl.shape != (n, p.classifier[0].shape[0]):
        raise ValueError(f"grad_logits shape {gl.shape} mismatches forward output")
    if ge.shape != cache.embeddings.shape:
        raise ValueError(f"grad_embeddings shape {ge.shape} mismatches forward output")

    features = cache.acts[-1]

    # classifier head
    wc, _ = p.classifier
    g_wc = gl.T @ features
    g_bc = gl.sum(axis=0)
    g_feat = gl @ wc

    # projection head, through the normalization: u -> u/|u|
    e = cache.embeddings
    g_raw = (ge - (ge * e).sum(axis=1, keepdims=True) * e) / cache.norms
    proj_grads: list[ParamPair] = [None] * len(p.projection)  # type: ignore[list-item]
    g = g_raw
    plast = len(p.projection) - 1
    for i in range(plast, -1, -1):
        if i != plast:
            g = g * (cache.proj_pre[i] > 0)
        inp = features if i == 0 else cache.proj_acts[i - 1]
        w, _ = p.projection[i]
        proj_grads[i] = (g.T @ inp, g.sum(axis=0))
        g = g @ w
    g_feat = g_feat + g

    # backbone
    layer_grads: list[ParamPair] = [None] * len(p.layers)  # type: ignore[list-item]
    g = g_feat
    last = len(p.layers) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (cache.pre[i] > 0)
        inp = cache.inputs if i == 0 else cache.acts[i - 1]
        w, _ = p.layers[i]
        layer_grads[i] = (g.T @ inp, g.sum(axis=0))
        g = g @ w

    return EncoderParams(layers=layer_grads, classifier=(g_wc, g_bc), projection=proj_grads)


def zeros_like_params(p: EncoderParams) -> EncoderParams:
    return EncoderParams(
        layers=[(np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers],
        classifier=(np.zeros_like(p.classifier[0]), np.zeros_like(p.classifier[1])),
        projection=[(np.zeros_like(w), np.zeros_like(b)) for w, b in p.projection],
    )


def copy_params(p: EncoderParams) -> EncoderParams:
    return EncoderParams(
        layers=[(w.copy(), b.copy()) for w, b in p.layers],
        classifier=(p.classifier[0].copy(), p.classifier[1].copy()),
        projection=[(w.copy(), b.copy()) for w, b in p.projection],
    )


def _zip_pairs(a: EncoderParams, b: EncoderParams):
    if len(a.layers) != len(b.layers) or len(a.projection) != len(b.projection):
        raise ValueError("parameter structure mismatch")
    for (wa, ba), (wb, bb) in zip(a.pairs(), b.pairs()):
        if wa.shape != wb.shape or ba.shape != bb.shape:
            raise ValueError("parameter shape mismatch")
        yield (wa, ba), (wb, bb)


def add_params(a: EncoderParams, b: EncoderParams) -> EncoderParams:
    pairs = [(wa + wb, ba + bb) for (wa, ba), (wb, bb) in _zip_pairs(a, b)]
    return _rebuild(a, pairs)


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> EncoderParams:
    """theta_k <- m * theta_k + (1 - m) * theta_q, shapes preserved."""
    pairs = [
        (m * wk + (1.0 - m) * wq, m * bk + (1.0 - m) * bq)
        for (wk, bk), (wq, bq) in _zip_pairs(key, query)
    ]
    return _rebuild(key, pairs)


def _rebuild(template: EncoderParams, pairs: list[ParamPair]) -> EncoderParams:
    nl = len(template.layers)
    np_ = len(template.projection)
    return EncoderParams(
        layers=pairs[:nl],
        classifier=pairs[nl],
        projection=pairs[nl + 1 : nl + 1 + np_],
    )


@dataclass
class KeyQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings.

    Each entry carries the key's assigned class (ground truth for
    labeled-source keys, None for plain unlabeled keys) and the source sample
    id so a query can exclude its own keys from the negatives.
    """

    capacity: int
    embeddings: np.ndarray = field(default=None)  # type: ignore[assignment]
    classes: np.ndarray = field(default=None)     # type: ignore[assignment]
    ids: np.ndarray = field(default=None)         # type: ignore[assignment]

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.embeddings is None:
            self.embeddings = np.zeros((0, 0))
            self.classes = np.zeros(0, dtype=np.int64)
            self.ids = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def push(self, keys: list[tuple[np.ndarray, int | None, int]]) -> None:
        """Append (embedding, class-or-None, source id) triples, oldest out."""
        if not keys:
            return
        embs = np.stack([np.asarray(k[0], dtype=np.float64) for k in keys])
        norms = np.linalg.norm(embs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("queue keys must be unit-norm")
        cls = np.array([-1 if k[1] is None else int(k[1]) for k in keys], dtype=np.int64)
        ids = np.array([int(k[2]) for k in keys], dtype=np.int64)
        if len(self) == 0:
            self.embeddings = embs
            self.classes = cls
            self.ids = ids
        else:
            self.embeddings = np.concatenate([self.embeddings, embs])
            self.classes = np.concatenate([self.classes, cls])
            self.ids = np.concatenate([self.ids, ids])
        if len(self) > self.capacity:
            cut = len(self) - self.capacity
            self.embeddings = self.embeddings[cut:]
            self.classes = self.classes[cut:]
            self.ids = self.ids[cut:]

    def entries(self) -> list[tuple[np.ndarray, int | None, int]]:
        """Oldest-first view of the queue contents."""
        return [
            (self.embeddings[i], None if self.classes[i] < 0 else int(self.classes[i]), int(self.ids[i]))
            for i in range(len(self))
        ]


def params_to_arrays(p: EncoderParams, prefix: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(p.layers):
        out[f"{prefix}_layer{i}_w"] = w
        out[f"{prefix}_layer{i}_b"] = b
    out[f"{prefix}_cls_w"], out[f"{prefix}_cls_b"] = p.classifier
    for i, (w, b) in enumerate(p.projection):
        out[f"{prefix}_proj{i}_w"] = w
        out[f"{prefix}_proj{i}_b"] = b
    return out


def params_from_arrays(d, prefix: str) -> EncoderParams:
    layers = []
    i = 0
    while f"{prefix}_layer{i}_w" in d:
        layers.append((np.array(d[f"{prefix}_layer{i}_w"]), np.array(d[f"{prefix}_layer{i}_b"])))
        i += 1
    classifier = (np.array(d[f"{prefix}_cls_w"]), np.array(d[f"{prefix}_cls_b"]))
    projection = []
    i = 0
    while f"{prefix}_proj{i}_w" in d:
        projection.append((np.array(d[f"{prefix}_proj{i}_w"]), np.array(d[f"{prefix}_proj{i}_b"])))
        i += 1
    return EncoderParams(layers=layers, classifier=classifier, projection=projection)


def save_checkpoint(
    path: str,
    query: EncoderParams,
    key: EncoderParams,
    queue: KeyQueue,
    velocity: EncoderParams,
) -> None:
    """Bit-exact dump of both encoders, the key queue, and optimizer velocity."""
    arrays = {}
    arrays.update(params_to_arrays(query, "q"))
    arrays.update(params_to_arrays(key, "k"))
    arrays.update(params_to_arrays(velocity, "v"))
    arrays["queue_emb"] = queue.embeddings
    arrays["queue_cls"] = queue.classes
    arrays["queue_ids"] = queue.ids
    meta = json.dumps({"version": CHECKPOINT_VERSION, "queue_capacity": queue.capacity})
    arrays["meta"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> tuple[EncoderParams, EncoderParams, KeyQueue, EncoderParams]:
    with np.load(path) as d:
        meta = json.loads(bytes(d["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        query = params_from_arrays(d, "q")
        key = params_from_arrays(d, "k")
        velocity = params_from_arrays(d, "v")
        queue = KeyQueue(
            capacity=int(meta["queue_capacity"]),
            embeddings=np.array(d["queue_emb"]),
            classes=np.array(d["queue_cls"]),
            ids=np.array(d["queue_ids"]),
        )
    return query, key, queue, velocity
