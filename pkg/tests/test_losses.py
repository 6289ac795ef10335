import numpy as np
import pytest

from sscl.losses import (
    ContrastiveInputs,
    LossWeights,
    contrastive_loss,
    contrastive_loss_margin_neg_form,
    contrastive_loss_softmax_form,
    cross_entropy,
    pseudo_label_loss,
    sup_loss,
    total_loss,
)


def fd_grad(fn, x, h=1e-5):
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    # vector-norm relative error, robust to entries below FD resolution
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_inputs(rng, max_pos=8, max_neg=64):
    kp = int(rng.integers(1, max_pos + 1))
    kn = int(rng.integers(1, max_neg + 1))
    return ContrastiveInputs(
        s_p=rng.uniform(-1, 1, kp),
        alpha_p=rng.uniform(0.05, 1.0, kp),
        s_n=rng.uniform(-1, 1, kn),
        gamma=float(rng.uniform(0.5, 50.0)),
        margin=float(rng.uniform(-1.0, 1.0)),
    )


class TestCrossEntropy:
    def test_uniform_logits_one_hot(self):
        for c in (2, 5, 10):
            target = np.zeros(c)
            target[0] = 1.0
            value, _ = cross_entropy(target, np.zeros(c))
            assert value == pytest.approx(np.log(c), abs=1e-12)

    def test_matching_target_zero_grad(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(0, 2, 6)
        z = np.exp(logits - logits.max())
        target = z / z.sum()
        _, grad = cross_entropy(target, logits)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_finite_difference(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            c = int(rng.integers(2, 9))
            target = rng.dirichlet(np.ones(c))
            logits = rng.normal(0, 2, c)
            _, grad = cross_entropy(target, logits)
            fd = fd_grad(lambda z: cross_entropy(target, z)[0], logits)
            assert rel_err(grad, fd) <= 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([1.0, 0.0]), np.zeros(3))


class TestSupLoss:
    def test_singleton_reduces_to_cross_entropy(self):
        logits = np.array([[0.3, -1.2, 0.8]])
        v, g = sup_loss([2], logits)
        t = np.array([0.0, 0.0, 1.0])
        v1, g1 = cross_entropy(t, logits[0])
        assert v == pytest.approx(v1, abs=1e-12)
        np.testing.assert_allclose(g[0], g1, atol=1e-12)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(0, 1, (4, 5))
        ys = [0, 2, 4, 1]
        v1, _ = sup_loss(ys, logits)
        v2, _ = sup_loss(ys + ys, np.vstack([logits, logits]))
        assert v1 == pytest.approx(v2, abs=1e-12)

    def test_empty_batch(self):
        v, g = sup_loss([], np.zeros((0, 4)))
        assert v == 0.0
        assert g.shape == (0, 4)

    def test_finite_difference(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0, 2, (3, 4))
        ys = [1, 3, 0]
        _, grad = sup_loss(ys, logits)
        fd = fd_grad(lambda z: sup_loss(ys, z.reshape(3, 4))[0], logits.ravel())
        assert rel_err(grad.ravel(), fd) <= 1e-6


class TestPseudoLabelLoss:
    def test_fully_masked(self):
        pseudo = np.full((4, 4), 0.25)
        v, g, kept = pseudo_label_loss(pseudo, 0.95, np.zeros((4, 4)))
        assert v == 0.0 and kept == 0
        np.testing.assert_array_equal(g, 0.0)

    def test_tiny_tau_one_hot_equals_sup_loss(self):
        rng = np.random.default_rng(4)
        ys = [0, 2, 1, 3, 2]
        pseudo = np.eye(4)[ys]
        logits = rng.normal(0, 1.5, (5, 4))
        v, g, kept = pseudo_label_loss(pseudo, 1e-9, logits)
        v2, g2 = sup_loss(ys, logits)
        assert kept == 5
        assert v == pytest.approx(v2, abs=1e-12)
        np.testing.assert_allclose(g, g2, atol=1e-12)

    def test_masked_entries_have_zero_grad(self):
        pseudo = np.array([[0.9, 0.1], [0.55, 0.45]])
        _, g, kept = pseudo_label_loss(pseudo, 0.8, np.array([[1.0, -1.0], [0.5, 0.5]]))
        assert kept == 1
        np.testing.assert_array_equal(g[1], 0.0)
        assert np.abs(g[0]).max() > 0

    def test_normalized_by_total_count(self):
        # one kept entry out of 3: loss = CE/3 regardless of masked rows
        pseudo = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
        logits = np.zeros((3, 2))
        v, _, kept = pseudo_label_loss(pseudo, 0.9, logits)
        assert kept == 1
        assert v == pytest.approx(np.log(2.0) / 3.0, abs=1e-12)

    def test_finite_difference_masked(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            m, c = int(rng.integers(1, 7)), int(rng.integers(2, 6))
            pseudo = rng.dirichlet(np.ones(c), size=m)
            tau = float(rng.uniform(0.3, 0.9))
            z = rng.normal(0, 2, (m, c))
            _, grad, _ = pseudo_label_loss(pseudo, tau, z)
            fd = fd_grad(lambda zz: pseudo_label_loss(pseudo, tau, zz.reshape(m, c))[0], z.ravel())
            assert rel_err(grad.ravel(), fd) <= 1e-6

    def test_empty(self):
        v, g, kept = pseudo_label_loss(np.zeros((0, 3)), 0.9, np.zeros((0, 3)))
        assert v == 0.0 and kept == 0


class TestContrastiveLoss:
    def test_closed_form(self):
        out = contrastive_loss(ContrastiveInputs(
            s_p=np.array([1.0]), alpha_p=np.array([1.0]),
            s_n=np.array([0.0]), gamma=1.0, margin=0.0,
        ))
        assert out.value == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)

    def test_margin_to_minus_infinity_kills_loss(self):
        out = contrastive_loss(ContrastiveInputs(
            s_p=np.array([0.5]), alpha_p=np.array([1.0]),
            s_n=np.array([0.9]), gamma=1.0, margin=-100.0,
        ))
        assert 0 <= out.value < 1e-40

    def test_single_positive_matches_infonce(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            sp = float(rng.uniform(-1, 1))
            sn = rng.uniform(-1, 1, int(rng.integers(1, 40)))
            g = float(rng.uniform(0.5, 20))
            out = contrastive_loss(ContrastiveInputs(
                s_p=np.array([sp]), alpha_p=np.array([1.0]),
                s_n=sn, gamma=g, margin=0.0,
            ))
            # brute-force InfoNCE evaluation
            oracle = -np.log(np.exp(g * sp) / (np.exp(g * sp) + np.sum(np.exp(g * sn))))
            assert out.value == pytest.approx(oracle, abs=1e-12)

    def test_large_gamma_no_overflow(self):
        out = contrastive_loss(ContrastiveInputs(
            s_p=np.array([-1.0, 0.2]), alpha_p=np.array([1.0, 0.7]),
            s_n=np.array([1.0] * 16), gamma=100.0, margin=1.0,
        ))
        assert np.isfinite(out.value)
        assert np.all(np.isfinite(out.grad_sp)) and np.all(np.isfinite(out.grad_sn))

    def test_degenerate_batches_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            contrastive_loss(ContrastiveInputs(
                s_p=np.array([]), alpha_p=np.array([]),
                s_n=np.array([0.0]), gamma=1.0, margin=0.0,
            ))
        with pytest.raises(ValueError, match="degenerate"):
            contrastive_loss(ContrastiveInputs(
                s_p=np.array([0.5]), alpha_p=np.array([1.0]),
                s_n=np.array([]), gamma=1.0, margin=0.0,
            ))

    def test_three_forms_agree(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            inp = random_inputs(rng, max_neg=256)
            v1 = contrastive_loss_softmax_form(inp)
            v2 = contrastive_loss_margin_neg_form(inp)
            v3 = contrastive_loss(inp).value
            assert abs(v1 - v3) <= 1e-9
            assert abs(v2 - v3) <= 1e-9

    def test_gradient_equilibrium(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            inp = random_inputs(rng)
            out = contrastive_loss(inp)
            sum_a = np.sum(out.grad_sp / (inp.gamma * inp.alpha_p))
            sum_b = np.sum(out.grad_sn / inp.gamma)
            assert abs(sum_a + sum_b) <= 1e-10

    def test_monotonicity_signs(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            inp = random_inputs(rng)
            out = contrastive_loss(inp)
            assert np.all(out.grad_sp < 0)  # increasing s_p decreases loss
            assert np.all(out.grad_sn > 0)  # increasing s_n increases loss

    def test_minmax_sandwich(self):
        rng = np.random.default_rng(10)
        for _ in range(2000):
            inp = random_inputs(rng)
            v = contrastive_loss(inp).value
            delta = inp.gamma * (inp.s_n.max() + inp.margin - np.min(inp.alpha_p * inp.s_p))
            lo = max(delta, 0.0)
            hi = max(delta + np.log(inp.s_p.size * inp.s_n.size), 0.0) + np.log(2.0)
            assert lo - 1e-9 <= v <= hi + 1e-9

    def test_finite_difference(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            inp = random_inputs(rng, max_pos=5, max_neg=12)
            out = contrastive_loss(inp)
            kp = inp.s_p.size

            def value_at(flat):
                return contrastive_loss(ContrastiveInputs(
                    s_p=flat[:kp], alpha_p=inp.alpha_p, s_n=flat[kp:],
                    gamma=inp.gamma, margin=inp.margin,
                )).value

            # step shrinks with gamma: central-difference truncation ~ h^2 gamma^3
            fd = fd_grad(value_at, np.concatenate([inp.s_p, inp.s_n]),
                         h=1e-5 / max(1.0, inp.gamma / 5.0))
            assert rel_err(np.concatenate([out.grad_sp, out.grad_sn]), fd) <= 1e-6


class TestTotalLoss:
    def _parts(self):
        rng = np.random.default_rng(12)
        sup = (1.3, rng.normal(0, 1, (2, 3)))
        pl = (0.7, rng.normal(0, 1, (4, 3)))
        ctr = (2.1, rng.normal(0, 1, (4, 5)))
        return sup, pl, ctr

    def test_zero_weights_give_supervised_only(self):
        sup, pl, ctr = self._parts()
        v, gs, gp, gc = total_loss(sup, pl, ctr, LossWeights(0.0, 0.0))
        assert v == sup[0]
        np.testing.assert_array_equal(gs, sup[1])
        np.testing.assert_array_equal(gp, 0.0)
        np.testing.assert_array_equal(gc, 0.0)

    def test_unit_weights_plain_sum(self):
        sup, pl, ctr = self._parts()
        v, _, gp, gc = total_loss(sup, pl, ctr, LossWeights(1.0, 1.0))
        assert v == pytest.approx(sup[0] + pl[0] + ctr[0], abs=1e-15)
        np.testing.assert_array_equal(gp, pl[1])
        np.testing.assert_array_equal(gc, ctr[1])

    def test_linear_in_each_weight(self):
        sup, pl, ctr = self._parts()
        vals = [total_loss(sup, pl, ctr, LossWeights(w, 0.5))[0] for w in (0.0, 1.0, 2.0)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-12)
        vals = [total_loss(sup, pl, ctr, LossWeights(0.5, w))[0] for w in (0.0, 1.0, 2.0)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-12)
