"""Scheduler, losses, optimizer, accumulation semantics, toy loop."""

import math

import mpmath
import numpy as np
import pytest

from sineseg.gradcheck import check_loss_gradients
from sineseg.layers import Conv3d
from sineseg.network import build_network, toy_config
from sineseg.train import (SgdOptimizer, TrainConfig, TrainHistory,
                           accumulate_and_step, combined_loss, cross_entropy_grad,
                           cross_entropy_loss, ds_weights, hard_dice, head_targets,
                           poly_lr, sgd_step, soft_dice_grad, soft_dice_loss, softmax,
                           train_toy)

mpmath.mp.dps = 50


class TestPolyLr:
    def test_epoch_zero(self):
        assert poly_lr(0, 1000) == 0.01

    def test_final_epoch(self):
        assert poly_lr(1000, 1000) == 0.0

    def test_midpoint_against_high_precision(self):
        oracle = float(mpmath.mpf("0.01") * mpmath.mpf("0.5") ** mpmath.mpf("0.9"))
        assert abs(poly_lr(500, 1000) - oracle) < 1e-12
        assert f"{poly_lr(500, 1000):.6g}" == "0.00535887"

    def test_strictly_decreasing(self):
        values = [poly_lr(e, 50) for e in range(51)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_epoch_out_of_range(self):
        with pytest.raises(ValueError):
            poly_lr(1001, 1000)


class TestCrossEntropy:
    def test_uniform_prediction(self):
        logits = np.zeros((2, 2, 2, 2))
        target = np.zeros((2, 2, 2))
        assert cross_entropy_loss(logits, target) == pytest.approx(math.log(2))

    def test_scalar_softmax_value(self):
        logits = np.zeros((2, 1, 1, 1))
        logits[0] = 2.0
        target = np.zeros((1, 1, 1))
        expected = -math.log(math.exp(2) / (math.exp(2) + 1))
        assert cross_entropy_loss(logits, target) == pytest.approx(expected)
        assert cross_entropy_loss(logits, target) == pytest.approx(0.126928, abs=1e-6)

    def test_saturation(self):
        logits = np.zeros((2, 1, 1, 1))
        logits[1] = 60.0
        target = np.ones((1, 1, 1))
        assert cross_entropy_loss(logits, target) < 1e-20

    def test_nonnegative(self, rng):
        for _ in range(10):
            logits = rng.standard_normal((2, 3, 3, 3)) * 5
            target = (rng.random((3, 3, 3)) < 0.5).astype(np.float64)
            assert cross_entropy_loss(logits, target) >= 0.0

    def test_stability_at_huge_logits(self):
        logits = np.full((2, 2, 2, 2), 1e4)
        target = np.ones((2, 2, 2))
        assert np.isfinite(cross_entropy_loss(logits, target))


class TestSoftDice:
    def test_perfect_overlap(self):
        target = np.zeros((2, 2, 2))
        target[0] = 1.0
        probs = np.stack([1.0 - target, target])
        assert soft_dice_loss(probs, target) == pytest.approx(0.0, abs=1e-5)

    def test_disjoint(self):
        target = np.zeros((2, 2, 2))
        target[0] = 1.0
        probs = np.stack([target, 1.0 - target])  # fg prob exactly on background
        assert soft_dice_loss(probs, target) == pytest.approx(1.0, abs=1e-5)

    def test_half_coverage_closed_form(self):
        target = np.zeros((2, 2, 2))
        target[0] = 1.0
        probs = np.full((2, 2, 2, 2), 0.5)
        assert soft_dice_loss(probs, target) == pytest.approx(0.5, abs=1e-5)

    def test_range(self, rng):
        for _ in range(10):
            p = rng.random((4, 4, 4))
            probs = np.stack([1 - p, p])
            target = (rng.random((4, 4, 4)) < 0.3).astype(np.float64)
            assert 0.0 <= soft_dice_loss(probs, target) <= 1.0

    def test_gradient_matches_fd(self):
        worst, tol = check_loss_gradients(seed=1)
        assert worst < tol


class TestCombinedLoss:
    def test_single_head(self, rng):
        logits = rng.standard_normal((2, 4, 4, 4))
        target = (rng.random((4, 4, 4)) < 0.4).astype(np.float64)
        expected = cross_entropy_loss(logits, target) \
            + soft_dice_loss(softmax(logits), target)
        assert combined_loss([logits], [target]) == pytest.approx(expected)

    def test_perfect_heads_near_zero(self):
        target = np.zeros((4, 4, 4))
        target[:2] = 1.0
        logits = np.stack([1.0 - target, target]) * 80.0
        targets = [target, target[::2, ::2, ::2]]
        logits2 = np.stack([1.0 - targets[1], targets[1]]) * 80.0
        assert combined_loss([logits, logits2], targets) == pytest.approx(0.0, abs=1e-4)

    def test_ds_weights_halving_normalized(self):
        np.testing.assert_allclose(ds_weights(2), [2 / 3, 1 / 3])
        np.testing.assert_allclose(ds_weights(4),
                                   np.array([8, 4, 2, 1]) / 15.0)
        assert math.isclose(sum(ds_weights(5)), 1.0)

    def test_weighted_mean_arithmetic(self):
        # two heads with per-head values 0.5 / 0.7 under halving weights
        assert np.dot(ds_weights(2), [0.5, 0.7]) == pytest.approx(0.5667, abs=1e-4)


class TestHeadTargets:
    def test_nearest_neighbor_striding(self):
        cfg = toy_config()
        target = np.zeros((8, 8, 8))
        target[0, 0, 0] = 1.0
        targets = head_targets(target, cfg)
        assert [t.shape for t in targets] == [(8, 8, 8), (4, 4, 4)]
        assert targets[1][0, 0, 0] == 1.0
        assert set(np.unique(targets[1])) <= {0.0, 1.0}


class TestSgd:
    def test_plain_sgd_momentum_zero(self):
        p = np.array([1.0])
        v = np.zeros(1)
        sgd_step(p, np.array([0.5]), lr=0.1, momentum=0.0, velocity=v)
        assert p[0] == pytest.approx(0.95)

    def test_zero_gradient(self):
        p = np.array([2.0])
        v = np.array([1.0])
        sgd_step(p, np.zeros(1), lr=0.1, momentum=0.9, velocity=v)
        assert v[0] == pytest.approx(0.9)
        assert p[0] == pytest.approx(2.0 - 0.1 * 0.81)

    def test_hand_unrolled_step(self):
        p = np.array([1.0])
        v = np.zeros(1)
        sgd_step(p, np.array([0.5]), lr=0.1, momentum=0.9, velocity=v)
        assert v[0] == pytest.approx(0.5)
        assert p[0] == pytest.approx(0.905)

    def test_optimizer_rejects_bad_momentum(self):
        with pytest.raises(ValueError):
            SgdOptimizer(momentum=1.0)


def tiny_sample(rng, dims=(8, 8, 8), channels=4):
    x = rng.standard_normal((channels,) + dims).astype(np.float32)
    labels = np.zeros(dims, dtype=np.float32)
    labels[2:5, 2:5, 2:5] = 1.0
    x[1][labels > 0] += 3.0
    return x, labels


class TestAccumulation:
    def test_accum_one_equals_plain_step(self, rng):
        x, labels = tiny_sample(rng)
        net_a = build_network(toy_config(seed=4), dtype=np.float64)
        net_b = build_network(toy_config(seed=4), dtype=np.float64)
        opt_a, opt_b = SgdOptimizer(0.9), SgdOptimizer(0.9)
        accumulate_and_step([(x, labels)], net_a, opt_a, lr=0.01)

        heads = net_b.forward(x)
        from sineseg.train import combined_loss_and_grads
        _, upstream = combined_loss_and_grads(heads, head_targets(labels, net_b.config))
        grads, _ = net_b.backward(upstream)
        opt_b.step(net_b.named_parameters(), grads, 0.01)
        for name, pa in net_a.named_parameters().items():
            np.testing.assert_allclose(pa, net_b.named_parameters()[name],
                                       rtol=1e-12, atol=1e-15)

    def test_identical_micro_batches_idempotent_mean(self, rng):
        x, labels = tiny_sample(rng)
        net_a = build_network(toy_config(seed=4), dtype=np.float64)
        net_b = build_network(toy_config(seed=4), dtype=np.float64)
        accumulate_and_step([(x, labels)], net_a, SgdOptimizer(0.9), lr=0.01)
        accumulate_and_step([(x, labels), (x, labels)], net_b, SgdOptimizer(0.9),
                            lr=0.01)
        for name, pa in net_a.named_parameters().items():
            np.testing.assert_allclose(pa, net_b.named_parameters()[name],
                                       rtol=1e-10, atol=1e-14)

    def test_matches_concatenated_batch_for_ce(self, rng):
        # pointwise model + mean-reduced CE: averaged micro-gradients must
        # equal the gradient of one concatenated batch
        conv = Conv3d(2, 2, (1, 1, 1), rng=rng, dtype=np.float64)
        x1 = rng.standard_normal((2, 4, 4, 4))
        x2 = rng.standard_normal((2, 4, 4, 4))
        t1 = (rng.random((4, 4, 4)) < 0.5).astype(np.float64)
        t2 = (rng.random((4, 4, 4)) < 0.5).astype(np.float64)

        def ce_grads(x, t):
            y = conv.forward(x)
            conv.backward(cross_entropy_grad(y, t))
            return {k: v.copy() for k, v in conv.grads.items()}

        g1 = ce_grads(x1, t1)
        g2 = ce_grads(x2, t2)
        micro_avg = {k: (g1[k] + g2[k]) / 2 for k in g1}
        gcat = ce_grads(np.concatenate([x1, x2], axis=1),
                        np.concatenate([t1, t2], axis=0))
        for k in micro_avg:
            np.testing.assert_allclose(micro_avg[k], gcat[k], rtol=1e-5)

    def test_empty_micro_batches_rejected(self, rng):
        net = build_network(toy_config())
        with pytest.raises(ValueError):
            accumulate_and_step([], net, SgdOptimizer(), lr=0.01)


class TestTrainToy:
    def test_zero_lr_is_parameter_noop(self, rng):
        x, labels = tiny_sample(rng)
        net = build_network(toy_config(seed=2))
        before = {k: v.copy() for k, v in net.named_parameters().items()}
        cfg = TrainConfig(lr0=0.0, max_epochs=3, accum_steps=1, seed=0,
                          patch_dims=(8, 8, 8))
        train_toy([(x, labels)], net, cfg)
        for name, arr in net.named_parameters().items():
            assert arr.tobytes() == before[name].tobytes()

    def test_history_lr_matches_closed_form(self, rng):
        x, labels = tiny_sample(rng)
        net = build_network(toy_config(seed=2))
        cfg = TrainConfig(max_epochs=4, accum_steps=1, seed=0, patch_dims=(8, 8, 8))
        history = train_toy([(x, labels)], net, cfg)
        assert history.lr == [poly_lr(e, 4, cfg.lr0, cfg.poly_exponent)
                              for e in range(4)]
        assert len(history.loss) == len(history.dice) == 4

    def test_loss_decreases_on_tiny_problem(self, rng):
        x, labels = tiny_sample(rng, dims=(16, 16, 16))
        net = build_network(toy_config(seed=0))
        cfg = TrainConfig(lr0=0.01, max_epochs=12, accum_steps=2, seed=0,
                          patch_dims=(16, 16, 16))
        history = train_toy([(x, labels)], net, cfg)
        assert min(history.loss[-3:]) < history.loss[0]

    def test_deterministic(self, rng):
        x, labels = tiny_sample(rng)
        cfg = TrainConfig(max_epochs=2, accum_steps=2, seed=3, patch_dims=(8, 8, 8))
        net_a = build_network(toy_config(seed=1))
        net_b = build_network(toy_config(seed=1))
        ha = train_toy([(x, labels)], net_a, cfg)
        hb = train_toy([(x, labels)], net_b, cfg)
        assert ha.loss == hb.loss
        for name, pa in net_a.named_parameters().items():
            assert pa.tobytes() == net_b.named_parameters()[name].tobytes()

    def test_history_csv(self, tmp_path):
        history = TrainHistory([0.01, 0.005], [1.0, 0.5], [0.2, 0.6])
        path = tmp_path / "history.csv"
        history.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,loss,dice"
        assert lines[1].startswith("0,0.01,1.0,")


class TestHardDice:
    def test_both_empty(self):
        assert hard_dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0

    def test_half_overlap(self):
        a = np.zeros(8)
        a[:4] = 1
        b = np.zeros(8)
        b[2:6] = 1
        assert hard_dice(a, b) == pytest.approx(0.5)
