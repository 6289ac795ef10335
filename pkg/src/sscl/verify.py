"""Self-contained property suites behind the `sscl verify` command.

Each suite draws its own fixed-seed random instances, checks a quantified
invariant, and reports the first counterexample on failure: the three
algebraic forms of the contrastive loss agree, gradients match finite
differences, positive and negative gradient mass balances exactly, the
smooth approximations respect their min/max sandwiches, and calibration
algebra preserves distributions.
"""
from __future__ import annotations

import numpy as np

from . import encoder as enc
from .cocalibration import calibrate
from .core_math import LOG2, lse, neg_lse, softplus
from .losses import (
    ContrastiveInputs,
    contrastive_loss,
    contrastive_loss_margin_neg_form,
    contrastive_loss_softmax_form,
    cross_entropy,
    pseudo_label_loss,
)


def _random_contrastive(rng: np.random.Generator, max_pos: int = 8, max_neg: int = 256) -> ContrastiveInputs:
    kp = int(rng.integers(1, max_pos + 1))
    kn = int(rng.integers(1, max_neg + 1))
    return ContrastiveInputs(
        s_p=rng.uniform(-1, 1, kp),
        alpha_p=rng.uniform(0.05, 1.0, kp),
        s_n=rng.uniform(-1, 1, kn),
        gamma=float(rng.uniform(0.5, 50.0)),
        margin=float(rng.uniform(-1.0, 1.0)),
    )


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Vector-norm relative error; robust to entries below FD resolution."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _fd_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def suite_three_form_equivalence(n: int = 1000, seed: int = 101) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        inp = _random_contrastive(rng)
        v1 = contrastive_loss_softmax_form(inp)
        v2 = contrastive_loss_margin_neg_form(inp)
        v3 = contrastive_loss(inp).value
        spread = max(abs(v1 - v3), abs(v2 - v3), abs(v1 - v2))
        worst = max(worst, spread)
        if spread > 1e-9:
            return False, f"instance {k}: forms spread {spread:.3e} > 1e-9 ({inp})"
    return True, f"max spread {worst:.3e} over {n} instances"


def suite_gradient_equilibrium(n: int = 1000, seed: int = 202) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        inp = _random_contrastive(rng)
        out = contrastive_loss(inp)
        # chain back to the pair logits a_k = g*(alpha*s_p - m), b_k = g*s_n
        sum_a = float(np.sum(out.grad_sp / (inp.gamma * inp.alpha_p)))
        sum_b = float(np.sum(out.grad_sn / inp.gamma))
        resid = abs(sum_a + sum_b)
        worst = max(worst, resid)
        if resid > 1e-10:
            return False, f"instance {k}: |sum dL/da + sum dL/db| = {resid:.3e} ({inp})"
    return True, f"max residual {worst:.3e} over {n} instances"


def suite_lse_softplus_bounds(n: int = 10000, seed: int = 303) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for k in range(n):
        size = int(rng.integers(1, 33))
        x = rng.uniform(-5, 5, size)
        g = float(rng.uniform(0.1, 10.0))
        slack = np.log(size) / g
        v = lse(x, g)
        if not (x.max() - 1e-12 <= v <= x.max() + slack + 1e-12):
            return False, f"instance {k}: lse bound violated (x={x}, g={g}, v={v})"
        v = neg_lse(x, g)
        if not (x.min() - slack - 1e-12 <= v <= x.min() + 1e-12):
            return False, f"instance {k}: neg_lse bound violated (x={x}, g={g}, v={v})"
        t = float(rng.uniform(-30, 30))
        v = softplus(t)
        if not (max(t, 0.0) - 1e-12 <= v <= max(t, 0.0) + LOG2 + 1e-12):
            return False, f"instance {k}: softplus bound violated (t={t}, v={v})"
    return True, f"{n} instances within the max/min/softplus sandwiches"


def suite_minmax_sandwich(n: int = 10000, seed: int = 404) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for k in range(n):
        inp = _random_contrastive(rng)
        value = contrastive_loss(inp).value
        delta = inp.gamma * (
            float(inp.s_n.max()) + inp.margin - float(np.min(inp.alpha_p * inp.s_p))
        )
        lo = max(delta, 0.0)
        hi = max(delta + np.log(inp.s_p.size * inp.s_n.size), 0.0) + LOG2
        if not (lo - 1e-9 <= value <= hi + 1e-9):
            return False, f"instance {k}: {lo} <= {value} <= {hi} fails ({inp})"
    return True, f"{n} instances inside the min-max sandwich"


def suite_loss_gradients_fdiff(n: int = 100, seed: int = 505) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        c = int(rng.integers(2, 9))
        target = rng.dirichlet(np.ones(c))
        logits = rng.normal(0, 2, c)
        _, grad = cross_entropy(target, logits)
        fd = _fd_grad(lambda z: cross_entropy(target, z)[0], logits)
        err = _rel_err(grad, fd)
        worst = max(worst, err)
        if err > 1e-6:
            return False, f"cross_entropy instance {k}: rel err {err:.3e}"

        m = int(rng.integers(1, 9))
        pseudo = rng.dirichlet(np.ones(c), size=m)
        tau = float(rng.uniform(0.3, 0.9))
        z = rng.normal(0, 2, (m, c))
        _, grad, _ = pseudo_label_loss(pseudo, tau, z)
        fd = _fd_grad(lambda zz: pseudo_label_loss(pseudo, tau, zz.reshape(m, c))[0], z.ravel())
        err = _rel_err(grad.ravel(), fd)
        worst = max(worst, err)
        if err > 1e-6:
            return False, f"pseudo_label_loss instance {k}: rel err {err:.3e}"

        inp = _random_contrastive(rng, max_pos=5, max_neg=16)
        out = contrastive_loss(inp)
        kp = inp.s_p.size

        def value_at(flat, inp=inp, kp=kp):
            return contrastive_loss(ContrastiveInputs(
                s_p=flat[:kp], alpha_p=inp.alpha_p, s_n=flat[kp:],
                gamma=inp.gamma, margin=inp.margin,
            )).value

        flat = np.concatenate([inp.s_p, inp.s_n])
        # truncation error of central differences grows ~ h^2 gamma^3, so the
        # step shrinks with the scale factor to keep the oracle itself valid
        fd = _fd_grad(value_at, flat, h=1e-5 / max(1.0, inp.gamma / 5.0))
        err = _rel_err(np.concatenate([out.grad_sp, out.grad_sn]), fd)
        worst = max(worst, err)
        if err > 1e-6:
            return False, f"contrastive_loss instance {k}: rel err {err:.3e}"
    return True, f"max rel err {worst:.3e} over {n} instances per loss"


def _random_network(rng: np.random.Generator):
    """Small random net + batch with margins away from ReLU kinks."""
    for _ in range(200):
        seed = int(rng.integers(2**31))
        p = enc.init_params([4, 6, 5], num_classes=3, embed_dim=4, seed=seed)
        # random nonzero biases exercise every gradient path
        for _, b in p.pairs():
            b[:] = rng.normal(0, 0.3, b.shape)
        x = rng.normal(0, 1, (3, 4))
        _, _, _, cache = enc.forward(p, x)
        margin = min(
            min(np.abs(z).min() for z in cache.pre),
            min(np.abs(z).min() for z in cache.proj_pre),
        )
        if margin > 1e-3 and cache.norms.min() > 1e-2:
            return p, x
    raise RuntimeError("could not sample a kink-free network")


def _flatten_params(p: enc.EncoderParams) -> np.ndarray:
    return np.concatenate([a.ravel() for pair in p.pairs() for a in pair])


def _unflatten_params(flat: np.ndarray, template: enc.EncoderParams) -> enc.EncoderParams:
    out = enc.copy_params(template)
    pos = 0
    for w, b in out.pairs():
        w[:] = flat[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        b[:] = flat[pos : pos + b.size]
        pos += b.size
    return out


def suite_encoder_backward_fdiff(n: int = 100, seed: int = 606) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        p, x = _random_network(rng)
        gl = rng.normal(0, 1, (3, 3))
        ge = rng.normal(0, 1, (3, 4))
        _, _, _, cache = enc.forward(p, x)
        analytic = _flatten_params(enc.backward(p, cache, gl, ge))

        def loss_at(flat):
            pp = _unflatten_params(flat, p)
            _, logits, emb, _ = enc.forward(pp, x)
            return float(np.sum(gl * logits) + np.sum(ge * emb))

        fd = _fd_grad(loss_at, _flatten_params(p))
        err = _rel_err(analytic, fd)
        worst = max(worst, err)
        if err > 1e-5:
            return False, f"network instance {k}: rel err {err:.3e}"
    return True, f"max rel err {worst:.3e} over {n} networks"


def suite_calibration_algebra(n: int = 10000, seed: int = 707) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for k in range(n):
        c = int(rng.integers(2, 17))
        p_b = rng.dirichlet(np.ones(c))
        p_s = rng.dirichlet(np.ones(c))
        out = calibrate(p_b, p_s)
        if abs(out.sum() - 1.0) > 1e-9 or (out < 0).any():
            return False, f"instance {k}: invalid calibrated distribution {out}"
        uniform = np.full(c, 1.0 / c)
        if not np.array_equal(calibrate(p_b, uniform), p_b):
            return False, f"instance {k}: uniform calibration is not the identity"
    return True, f"{n} random pairs calibrate to valid distributions"


def suite_queue_fifo(n: int = 200, seed: int = 808) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for k in range(n):
        cap = int(rng.integers(1, 17))
        q = enc.KeyQueue(capacity=cap)
        expected: list[int] = []
        next_id = 0
        for _ in range(int(rng.integers(1, 12))):
            count = int(rng.integers(0, 7))
            keys = []
            for _ in range(count):
                v = rng.normal(0, 1, 4)
                v /= np.linalg.norm(v)
                keys.append((v, None, next_id))
                expected.append(next_id)
                next_id += 1
            q.push(keys)
            expected = expected[-cap:]
            if list(q.ids) != expected:
                return False, f"instance {k}: FIFO order broken"
            if len(q) > cap:
                return False, f"instance {k}: capacity exceeded"
            if len(q) and np.abs(np.linalg.norm(q.embeddings, axis=1) - 1).max() > 1e-9:
                return False, f"instance {k}: stored key not unit-norm"
    return True, f"{n} random push sequences preserve FIFO semantics"


SUITES = [
    ("three-form-equivalence", suite_three_form_equivalence),
    ("gradient-equilibrium", suite_gradient_equilibrium),
    ("lse-softplus-bounds", suite_lse_softplus_bounds),
    ("minmax-sandwich", suite_minmax_sandwich),
    ("loss-gradients-fdiff", suite_loss_gradients_fdiff),
    ("encoder-backward-fdiff", suite_encoder_backward_fdiff),
    ("calibration-algebra", suite_calibration_algebra),
    ("queue-fifo", suite_queue_fifo),
]


def run_all(out=print) -> int:
    """Run every suite; return 0 iff all pass."""
    failures = 0
    for name, fn in SUITES:
        ok, detail = fn()
        if ok:
            out(f"PASS {name}: {detail}")
        else:
            failures += 1
            out(f"FAIL {name}: {detail}")
    return 0 if failures == 0 else 1
