import numpy as np
import pytest

import sscl.encoder as enc
from sscl.cocalibration import CalibrationState, LabeledKeyPool, Prototype, PseudoRecord
from sscl.data import AugmentConfig, BatchStream, Dataset, Sample
from sscl.losses import ContrastiveInputs, contrastive_loss, pseudo_label_loss, sup_loss
from sscl.trainer import (
    DataSpec,
    OptimizerState,
    TrainConfig,
    TrainerState,
    cosine_lr,
    evaluate,
    init_trainer,
    intra_class_similarity,
    load_run_state,
    metrics_csv,
    run_experiment,
    save_run_state,
    sgd_step,
    train_step,
)

TINY = dict(
    data=DataSpec(kind="gaussian", num_classes=3, dim=4, samples_per_class=40,
                  class_sep=5.0, labels_per_class=3),
    batch_size=4, mu=2, queue_size=32, lr0=0.01,
)


def tiny_cfg(**kw):
    merged = {**TINY, **kw}
    return TrainConfig(**merged)


def params_equal(a, b):
    return all(
        np.array_equal(wa, wb) and np.array_equal(ba, bb)
        for (wa, ba), (wb, bb) in zip(a.pairs(), b.pairs())
    )


class TestSgdStep:
    def mk(self, momentum=0.9, wd=0.0):
        p = enc.init_params([3, 4], 2, 2, seed=0)
        opt = OptimizerState(velocity=enc.zeros_like_params(p), lr0=0.1,
                             momentum=momentum, weight_decay=wd)
        g = enc.init_params([3, 4], 2, 2, seed=1)
        return p, g, opt

    def test_zero_lr_keeps_params_updates_velocity(self):
        p, g, opt = self.mk()
        p2, opt2 = sgd_step(p, g, opt, lr=0.0)
        assert params_equal(p, p2)
        assert params_equal(opt2.velocity, g)  # v = 0.9*0 + g + 0*p

    def test_plain_gradient_descent_reduction(self):
        p, g, opt = self.mk(momentum=0.0, wd=0.0)
        p2, _ = sgd_step(p, g, opt, lr=0.5)
        for (w2, _), (w, _), (gw, _) in zip(p2.pairs(), p.pairs(), g.pairs()):
            np.testing.assert_array_equal(w2, w - 0.5 * gw)

    def test_two_step_hand_oracle(self):
        beta = 0.9
        p, g, opt = self.mk(momentum=beta, wd=0.0)
        p0 = enc.copy_params(p)
        p1, opt = sgd_step(p, g, opt, lr=0.1)
        p2, _ = sgd_step(p1, g, opt, lr=0.1)
        # constant gradient: displacement after 2 steps = lr*g*(2 + beta)
        for (w2, _), (w0, _), (gw, _) in zip(p2.pairs(), p0.pairs(), g.pairs()):
            np.testing.assert_allclose(w2, w0 - 0.1 * gw * (2 + beta), atol=1e-12)

    def test_weight_decay_folded_into_gradient(self):
        p, g, opt = self.mk(momentum=0.0, wd=0.1)
        zero_g = enc.zeros_like_params(p)
        p2, _ = sgd_step(p, zero_g, opt, lr=1.0)
        for (w2, _), (w, _) in zip(p2.pairs(), p.pairs()):
            np.testing.assert_allclose(w2, w * 0.9, atol=1e-12)

    def test_shape_mismatch(self):
        p, g, opt = self.mk()
        bad = enc.init_params([3, 5], 2, 2, seed=2)
        with pytest.raises(ValueError):
            sgd_step(p, bad, opt, lr=0.1)


class TestCosineLr:
    def test_schedule_start(self):
        assert cosine_lr(0, 10, 0.03) == pytest.approx(0.03, abs=1e-15)

    def test_midpoint_half(self):
        assert cosine_lr(5, 10, 0.03) == pytest.approx(0.015, abs=1e-12)

    def test_monotone_nonincreasing(self):
        vals = [cosine_lr(e, 40, 0.1) for e in range(40)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(10, 10, 0.1)
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 0.1)


class TestTrainStep:
    def test_zero_lr_step_decouples_queue(self):
        cfg = tiny_cfg(epochs=4)
        st = init_trainer(cfg)
        from sscl.trainer import run_refresh
        run_refresh(st)
        before = enc.copy_params(st.params_q)
        batch = st.stream.epoch()[0]
        train_step(st, batch, lr=0.0)
        assert params_equal(before, st.params_q)
        assert len(st.queue) == cfg.mu * cfg.batch_size

    def test_training_never_reads_hidden_labels(self):
        cfg = tiny_cfg(epochs=4)
        st = init_trainer(cfg)
        from sscl.trainer import run_refresh
        run_refresh(st)
        reads = st.ds.hidden_reads
        for batch in st.stream.epoch()[:3]:
            train_step(st, batch, lr=0.01)
        assert st.ds.hidden_reads == reads

    def test_loss_values_finite(self):
        cfg = tiny_cfg(epochs=2)
        hist, _ = run_experiment(cfg)
        for m in hist:
            assert np.isfinite([m.loss_sup, m.loss_pl, m.loss_ctr]).all()


def rigged_state():
    """Hand-built perfectly separable state: every metric should hit 1.0."""
    mkx = lambda a, b: np.array([a, b], dtype=float)
    ds = Dataset(
        labeled=[Sample(mkx(5, 0), 0, 0), Sample(mkx(-5, 0), 1, 1)],
        unlabeled=[Sample(mkx(4.8, 0.1), None, 2), Sample(mkx(-4.9, -0.1), None, 3)],
        test=[Sample(mkx(5.1, 0.2), 0, 4), Sample(mkx(5.0, -0.1), 0, 5),
              Sample(mkx(-5.2, 0.1), 1, 6), Sample(mkx(-5.0, 0.2), 1, 7)],
        num_classes=2, dim=2, hidden={2: 0, 3: 1},
    )
    eye = np.eye(2)
    params = enc.EncoderParams(
        layers=[(eye.copy(), np.zeros(2))],
        classifier=(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2)),
        projection=[(eye.copy(), np.zeros(2)), (eye.copy(), np.zeros(2))],
    )
    calib = CalibrationState(num_classes=2)
    calib.prototypes = [Prototype(0, np.array([1.0, 0.0]), 1), Prototype(1, np.array([-1.0, 0.0]), 1)]
    calib.pseudo_cache = {
        2: PseudoRecord(0, 1.0, 1.0, np.array([1.0, 0.0])),
        3: PseudoRecord(1, 1.0, 1.0, np.array([0.0, 1.0])),
    }
    cfg = tiny_cfg(epochs=1)
    return TrainerState(
        cfg=cfg, ds=ds, params_q=params, params_k=enc.copy_params(params),
        opt=OptimizerState(enc.zeros_like_params(params), 0.01, 0.9, 0.0),
        queue=enc.KeyQueue(capacity=8), labeled_pool=LabeledKeyPool(2, 4),
        calib=calib, stream=BatchStream(ds, 1, 1, AugmentConfig(), AugmentConfig(), 0),
        mixup_rng=np.random.default_rng(0),
    )


class TestEvaluate:
    def test_perfect_state_hits_ceiling(self):
        st = rigged_state()
        m = evaluate(st)
        assert m["top1"] == 1.0
        assert m["pl_acc"] == 1.0
        assert m["proto_acc"] == 1.0
        assert m["overlap"] == 1.0
        assert m["pos_sel_acc"] == 1.0

    def test_purity(self):
        st = rigged_state()
        assert evaluate(st) == evaluate(st)

    def test_random_embeddings_intra_near_zero(self):
        # Monte-Carlo oracle: random unit vectors in high dim have ~0 cosine
        rng = np.random.default_rng(0)
        emb = rng.normal(0, 1, (600, 32))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        labels = np.repeat(np.arange(3), 200)
        assert abs(intra_class_similarity(emb, labels, 3)) < 0.02

    def test_intra_one_for_identical_embeddings(self):
        emb = np.tile(np.array([[1.0, 0.0]]), (6, 1))
        labels = np.array([0, 0, 0, 1, 1, 1])
        assert intra_class_similarity(emb, labels, 2) == pytest.approx(1.0, abs=1e-12)


class TestRunExperiment:
    def test_zero_epochs(self):
        hist, st = run_experiment(tiny_cfg(epochs=0))
        assert hist == []
        assert st.epoch == 0

    def test_bit_identical_metrics_across_reruns(self):
        cfg = tiny_cfg(epochs=3, seed=11)
        h1, _ = run_experiment(cfg)
        h2, _ = run_experiment(cfg)
        assert metrics_csv(h1) == metrics_csv(h2)

    def test_different_seeds_differ(self):
        h1, _ = run_experiment(tiny_cfg(epochs=2, seed=0))
        h2, _ = run_experiment(tiny_cfg(epochs=2, seed=1))
        assert metrics_csv(h1) != metrics_csv(h2)

    def test_metrics_csv_format(self):
        hist, _ = run_experiment(tiny_cfg(epochs=2))
        text = metrics_csv(hist)
        lines = text.splitlines()
        assert lines[0] == ("epoch,loss_sup,loss_pl,loss_ctr,kept_frac,top1,"
                            "pl_acc,proto_acc,overlap,intra_sim,pos_sel_acc")
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "0"
        assert all("." in v and len(v.split(".")[1]) == 6 for v in first[1:])
        assert "\r" not in text and text.endswith("\n")

    def test_checkpoint_round_trip_mid_run(self, tmp_path):
        cfg = tiny_cfg(epochs=4, seed=5)
        straight, st_straight = run_experiment(cfg)

        _, st_partial = run_experiment(cfg, stop_after=2)
        path = str(tmp_path / "run.npz")
        save_run_state(path, st_partial)
        resumed_state = load_run_state(path, cfg)
        resumed, st_resumed = run_experiment(cfg, resume=resumed_state)

        assert metrics_csv(straight) == metrics_csv(resumed)
        assert params_equal(st_straight.params_q, st_resumed.params_q)
        assert params_equal(st_straight.params_k, st_resumed.params_k)
        assert np.array_equal(st_straight.queue.embeddings, st_resumed.queue.embeddings)
        assert np.array_equal(st_straight.queue.ids, st_resumed.queue.ids)


# --- reduction fidelity: independent reference loops -----------------------


def reference_supervised_loop(cfg: TrainConfig, epochs: int):
    """Plain supervised loop over the same seeded stream and primitives."""
    st = init_trainer(cfg)
    params, opt = st.params_q, st.opt
    for epoch in range(epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        for batch in st.stream.epoch():
            x = np.stack([s.x for s in batch.labeled])
            ys = [s.y for s in batch.labeled]
            _, logits, _, cache = enc.forward(params, x)
            _, g = sup_loss(ys, logits)
            grads = enc.backward(params, cache, g, np.zeros_like(cache.embeddings))
            params, opt = sgd_step(params, grads, opt, lr)
    return params


def reference_pseudo_label_loop(cfg: TrainConfig, epochs: int):
    """FixMatch-style loop: supervised + masked pseudo-label CE, no contrastive."""
    st = init_trainer(cfg)
    params, opt = st.params_q, st.opt
    targets_by_id = {}
    for epoch in range(epochs):
        if epoch % cfg.refresh_period == 0:
            xs = np.stack([s.x for s in st.ds.unlabeled])
            _, logits, _, _ = enc.forward(params, xs)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            targets_by_id = {s.id: probs[i].copy() for i, s in enumerate(st.ds.unlabeled)}
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        for batch in st.stream.epoch():
            x = np.stack([s.x for s in batch.labeled])
            ys = [s.y for s in batch.labeled]
            _, logits_l, _, cache_l = enc.forward(params, x)
            _, g_sup = sup_loss(ys, logits_l)
            xs = np.stack([p.strong.x for p in batch.unlabeled])
            _, logits_u, _, cache_u = enc.forward(params, xs)
            targets = np.stack([targets_by_id[p.id] for p in batch.unlabeled])
            _, g_pl, _ = pseudo_label_loss(targets, cfg.tau, logits_u)
            grads = enc.add_params(
                enc.backward(params, cache_l, g_sup, np.zeros_like(cache_l.embeddings)),
                enc.backward(params, cache_u, cfg.lambda_pl * g_pl,
                             np.zeros_like(cache_u.embeddings)),
            )
            params, opt = sgd_step(params, grads, opt, lr)
    return params


def reference_moco_loop(cfg: TrainConfig, epochs: int):
    """Instance-discrimination loop plus supervised head, no class positives."""
    st = init_trainer(cfg)
    params_q, params_k, opt = st.params_q, st.params_k, st.opt
    queue = enc.KeyQueue(capacity=cfg.queue_size)
    for epoch in range(epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        for batch in st.stream.epoch():
            x = np.stack([s.x for s in batch.labeled])
            ys = [s.y for s in batch.labeled]
            _, logits_l, _, cache_l = enc.forward(params_q, x)
            _, g_sup = sup_loss(ys, logits_l)
            n_u = len(batch.unlabeled)
            xs = np.stack([p.strong.x for p in batch.unlabeled])
            _, logits_u, emb_u, cache_u = enc.forward(params_q, xs)
            xw = np.stack([p.weak.x for p in batch.unlabeled])
            _, _, keys_w, _ = enc.forward(params_k, xw)
            grad_emb = np.zeros_like(emb_u)
            s_n_all = emb_u @ queue.embeddings.T if len(queue) else None
            for i, pair in enumerate(batch.unlabeled):
                if s_n_all is None:
                    continue
                mask = queue.ids != pair.id
                if not mask.any():
                    continue
                pos_mat = np.stack([keys_w[i]])
                out = contrastive_loss(ContrastiveInputs(
                    s_p=pos_mat @ emb_u[i], alpha_p=np.ones(1),
                    s_n=s_n_all[i][mask], gamma=cfg.gamma, margin=cfg.margin,
                ))
                grad_emb[i] = pos_mat.T @ out.grad_sp + queue.embeddings[mask].T @ out.grad_sn
            grad_emb = grad_emb / n_u
            grads = enc.add_params(
                enc.backward(params_q, cache_l, g_sup, np.zeros_like(cache_l.embeddings)),
                enc.backward(params_q, cache_u, cfg.lambda_pl * np.zeros_like(logits_u),
                             cfg.lambda_ctr * grad_emb),
            )
            params_q, opt = sgd_step(params_q, grads, opt, lr)
            params_k = enc.momentum_update(params_k, params_q, cfg.momentum_m)
            queue.push([(keys_w[i], None, p.id) for i, p in enumerate(batch.unlabeled)])
    return params_q


class TestReductionFidelity:
    EPOCHS = 2

    def test_supervised_only_reduction(self):
        cfg = tiny_cfg(epochs=self.EPOCHS, seed=3, lambda_pl=0.0, lambda_ctr=0.0)
        _, st = run_experiment(cfg)
        ref = reference_supervised_loop(cfg, self.EPOCHS)
        assert params_equal(st.params_q, ref)

    def test_pseudo_label_only_reduction(self):
        cfg = tiny_cfg(epochs=self.EPOCHS, seed=4, lambda_ctr=0.0, calibration=False)
        _, st = run_experiment(cfg)
        ref = reference_pseudo_label_loop(cfg, self.EPOCHS)
        assert params_equal(st.params_q, ref)

    def test_moco_style_reduction(self):
        cfg = tiny_cfg(epochs=self.EPOCHS, seed=5, lambda_pl=0.0, n_pos=0, calibration=False)
        _, st = run_experiment(cfg)
        ref = reference_moco_loop(cfg, self.EPOCHS)
        assert params_equal(st.params_q, ref)


class TestTwoMoonsOracles:
    """Dataset-level oracle pinned before the main experiments: two moons is
    not linearly separable but a small nonlinear encoder solves it."""

    def _moons_cfg(self, labels_per_class):
        return tiny_cfg(
            epochs=60, seed=7, lambda_pl=0.0, lambda_ctr=0.0, lr0=0.03,
            batch_size=16,
            data=DataSpec(kind="moons", moon_samples=1000, moon_noise=0.1,
                          labels_per_class=labels_per_class),
        )

    def test_linear_oracle_below_90(self):
        from sscl.data import make_two_moons
        ds = make_two_moons(1000, 0.1, seed=3)
        x = np.stack([s.x for s in ds.labeled])
        y = np.array([1.0 if s.y else -1.0 for s in ds.labeled])
        xb = np.column_stack([x, np.ones(len(x))])
        w = np.linalg.lstsq(xb, y, rcond=None)[0]
        xt = np.column_stack([np.stack([s.x for s in ds.test]), np.ones(len(ds.test))])
        pred = (xt @ w > 0).astype(int)
        truth = np.array([s.y for s in ds.test])
        acc = float(np.mean(pred == truth))
        assert acc < 0.90

    def test_mlp_supervised_reaches_95(self):
        cfg = self._moons_cfg(labels_per_class=400)  # full training pool
        hist, _ = run_experiment(cfg)
        assert hist[-1].top1 >= 0.95
