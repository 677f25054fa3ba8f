import math

import numpy as np
import pytest
import torch

from qmaxseg import (ConfigError, DataError, LossWeights, ScribbleMap,
                     dice_loss, esl_loss, mix_pseudo_label, partial_ce,
                     psl_loss, ssl_loss, total_loss)

import oracles


def t(a, dtype=torch.float64):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


# ---------------------------------------------------------------------------
# partial cross-entropy
# ---------------------------------------------------------------------------

class TestPartialCE:
    def test_all_unknown_is_zero(self):
        logits = torch.randn(4, 8, 8, dtype=torch.float64)
        labels = torch.full((8, 8), 4)
        assert float(partial_ce(logits, labels, unknown_code=4)) == 0.0

    def test_single_pixel_uniform_logits(self):
        logits = torch.zeros(4, 3, 3, dtype=torch.float64)
        labels = torch.full((3, 3), 4)
        labels[1, 1] = 2
        val = float(partial_ce(logits, labels, 4))
        assert val == pytest.approx(math.log(4.0), rel=1e-12)

    def test_mixed_2x2_matches_oracle(self):
        logits = np.array([[[0.5, -1.2], [2.0, 0.3]],
                           [[-0.4, 0.8], [1.1, -0.7]]])
        labels = np.array([[0, 2], [1, 0]])
        expected = 0.6318564789941329  # frozen from the per-pixel reference
        assert oracles.ref_partial_ce(logits, labels, 2) == pytest.approx(expected, rel=1e-12)
        val = float(partial_ce(t(logits), t(labels, torch.long), 2))
        assert val == pytest.approx(expected, rel=1e-9)

    def test_random_instances_match_oracle(self, rng):
        for _ in range(25):
            logits = rng.normal(size=(4, 8, 8)) * 3
            labels = rng.integers(0, 5, size=(8, 8))  # 4 == unknown
            got = float(partial_ce(t(logits), t(labels, torch.long), 4))
            want = oracles.ref_partial_ce(logits, labels, 4)
            assert oracles.rel_err(got, want) <= 1e-9

    def test_ignores_unlabeled_logits_bitwise(self, rng):
        logits = rng.normal(size=(3, 6, 6))
        labels = rng.integers(0, 4, size=(6, 6))
        base = float(partial_ce(t(logits), t(labels, torch.long), 3))
        tweaked = logits.copy()
        tweaked[:, labels == 3] += rng.normal(size=(3, int((labels == 3).sum()))) * 100
        after = float(partial_ce(t(tweaked), t(labels, torch.long), 3))
        assert base == after  # exact: unlabeled logits never enter the graph

    def test_equals_full_ce_when_fully_annotated(self, rng):
        logits = rng.normal(size=(4, 8, 8))
        labels = rng.integers(0, 4, size=(8, 8))
        got = float(partial_ce(t(logits), t(labels, torch.long), 4))
        want = float(torch.nn.functional.cross_entropy(
            t(logits).unsqueeze(0), t(labels, torch.long).unsqueeze(0)))
        assert oracles.rel_err(got, want) <= 1e-9

    def test_out_of_range_class_raises(self):
        logits = torch.randn(4, 2, 2)
        labels = torch.tensor([[7, 4], [4, 4]])
        with pytest.raises(DataError):
            partial_ce(logits, labels, 4)

    def test_gradient_matches_finite_differences(self, rng):
        labels = rng.integers(0, 5, size=(8, 8))
        x0 = rng.normal(size=(4, 8, 8))
        lt = t(labels, torch.long)

        def fn(x):
            return float(partial_ce(t(x), lt, 4))

        xt = t(x0).requires_grad_(True)
        partial_ce(xt, lt, 4).backward()
        grad = xt.grad.numpy()
        for index in [(0, 0, 0), (1, 3, 4), (3, 7, 7), (2, 2, 5)]:
            fd = oracles.central_diff(fn, x0, index)
            assert oracles.rel_err(grad[index], fd, floor=1e-7) <= 1e-4


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------

class TestDice:
    def test_perfect_overlap(self):
        target = t(oracles.ref_one_hot(np.array([[0, 1], [1, 0]]), 2))
        assert float(dice_loss(target, target)) <= 1e-4

    def test_disjoint_one_hot(self):
        a = np.zeros((2, 4, 4))
        b = np.zeros((2, 4, 4))
        a[0, :2], a[1, 2:] = 1, 1
        b[0, 2:], b[1, :2] = 1, 1
        val = float(dice_loss(t(a), t(b)))
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_random_instance_frozen(self):
        rng = np.random.default_rng(11)
        p = rng.random((2, 4, 4))
        p /= p.sum(axis=0, keepdims=True)
        g = oracles.ref_one_hot(rng.integers(0, 2, size=(4, 4)), 2)
        expected = 0.5244225193999358  # frozen from the formula reference
        assert oracles.ref_dice_loss(p, g) == pytest.approx(expected, rel=1e-12)
        assert float(dice_loss(t(p), t(g))) == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ConfigError):
            dice_loss(torch.rand(2, 4, 4), torch.rand(2, 4, 5))

    def test_gradient_matches_finite_differences(self, rng):
        g = oracles.ref_one_hot(rng.integers(0, 3, size=(8, 8)), 3)
        x0 = rng.random((3, 8, 8))
        gt = t(g)

        def fn(x):
            return float(dice_loss(t(x), gt))

        xt = t(x0).requires_grad_(True)
        dice_loss(xt, gt).backward()
        grad = xt.grad.numpy()
        for index in [(0, 0, 0), (1, 4, 4), (2, 7, 1)]:
            fd = oracles.central_diff(fn, x0, index)
            assert oracles.rel_err(grad[index], fd, floor=1e-7) <= 1e-4


# ---------------------------------------------------------------------------
# pseudo-label mixing
# ---------------------------------------------------------------------------

class TestMixPseudoLabel:
    def test_equal_inputs_any_alpha(self, rng):
        y = t(rng.random((3, 5, 5)))
        y = y / y.sum(0, keepdim=True)
        want = y.argmax(0)
        for alpha in (0.1, 0.5, 0.9):
            assert torch.equal(mix_pseudo_label(y, y, alpha), want)

    def test_worked_two_class_pixel(self):
        y1 = t(np.array([0.6, 0.4]).reshape(2, 1, 1))
        y2 = t(np.array([0.3, 0.7]).reshape(2, 1, 1))
        assert int(mix_pseudo_label(y1, y2, 0.5)[0, 0]) == 1  # 0.45 vs 0.55

    def test_shared_argmax_preserved(self, rng):
        for _ in range(100):
            y1 = rng.random((4, 6, 6))
            y2 = rng.random((4, 6, 6))
            y1 /= y1.sum(0)
            y2 /= y2.sum(0)
            alpha = float(rng.uniform(0.01, 0.99))
            mixed = mix_pseudo_label(t(y1), t(y2), alpha).numpy()
            same = y1.argmax(0) == y2.argmax(0)
            assert (mixed[same] == y1.argmax(0)[same]).all()

    def test_alpha_bounds(self):
        y = torch.rand(2, 3, 3)
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                mix_pseudo_label(y, y, bad)

    def test_no_gradient_through_label(self):
        y1 = torch.rand(2, 3, 3, requires_grad=True)
        y2 = torch.rand(2, 3, 3)
        out = mix_pseudo_label(y1, y2, 0.4)
        assert not out.requires_grad


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

class TestPslLoss:
    def test_hard_one_hot_agreement(self):
        labels = np.array([[0, 1], [2, 0]])
        y = t(oracles.ref_one_hot(labels, 3))
        assert float(psl_loss(y, y, 0.5)) <= 1e-4

    def test_swap_symmetry(self, rng):
        for _ in range(50):
            y1 = t(rng.random((3, 4, 4)))
            y2 = t(rng.random((3, 4, 4)))
            y1 = y1 / y1.sum(0, keepdim=True)
            y2 = y2 / y2.sum(0, keepdim=True)
            alpha = float(rng.uniform(0.05, 0.95))
            a = float(psl_loss(y1, y2, alpha))
            b = float(psl_loss(y2, y1, 1.0 - alpha))
            assert abs(a - b) <= 1e-12

    def test_random_instance_frozen(self):
        rng = np.random.default_rng(12)
        y1 = rng.random((3, 3, 3))
        y1 /= y1.sum(axis=0, keepdims=True)
        y2 = rng.random((3, 3, 3))
        y2 /= y2.sum(axis=0, keepdims=True)
        expected = 0.5415490357583157  # frozen from composed references
        assert oracles.ref_psl_loss(y1, y2, 0.37) == pytest.approx(expected, rel=1e-12)
        assert float(psl_loss(t(y1), t(y2), 0.37)) == pytest.approx(expected, rel=1e-9)

    def test_background_exclusion_flag(self, rng):
        y1 = t(rng.random((3, 4, 4)))
        y2 = t(rng.random((3, 4, 4)))
        y1 = y1 / y1.sum(0, keepdim=True)
        y2 = y2 / y2.sum(0, keepdim=True)
        with_bg = float(psl_loss(y1, y2, 0.5, include_background=True))
        without = float(psl_loss(y1, y2, 0.5, include_background=False))
        assert with_bg != without


class TestEslLoss:
    def test_identical_is_zero(self):
        x = torch.rand(1, 8, 8)
        assert float(esl_loss(x, x)) == 0.0

    def test_unit_difference(self):
        assert float(esl_loss(torch.ones(1, 4, 4), torch.zeros(1, 4, 4))) == 1.0

    def test_worked_2x2(self):
        pred = t(np.array([[0.0, 0.5], [1.0, 0.25]])[None])
        gt = t(np.array([[0.0, 1.0], [1.0, 0.0]])[None])
        assert float(esl_loss(pred, gt)) == pytest.approx(0.078125, abs=1e-12)

    def test_random_matches_oracle(self, rng):
        pred = rng.random((1, 5, 5))
        gt = rng.random((1, 5, 5))
        got = float(esl_loss(t(pred), t(gt)))
        assert oracles.rel_err(got, oracles.ref_mse(pred, gt)) <= 1e-9

    def test_gradient_matches_finite_differences(self, rng):
        gt_arr = rng.random((1, 8, 8))
        x0 = rng.random((1, 8, 8))
        gtt = t(gt_arr)

        def fn(x):
            return float(esl_loss(t(x), gtt))

        xt = t(x0).requires_grad_(True)
        esl_loss(xt, gtt).backward()
        grad = xt.grad.numpy()
        for index in [(0, 0, 0), (0, 3, 6), (0, 7, 7)]:
            fd = oracles.central_diff(fn, x0, index)
            assert oracles.rel_err(grad[index], fd, floor=1e-7) <= 1e-4


class TestSslAndTotal:
    def test_identical_heads(self, rng):
        logits = t(rng.normal(size=(3, 4, 4)))
        labels = t(rng.integers(0, 4, size=(4, 4)), torch.long)
        both = float(ssl_loss(labels, logits, logits, 3))
        single = float(partial_ce(logits, labels, 3))
        assert both == pytest.approx(single, rel=1e-12)

    def test_all_unknown(self):
        logits = torch.randn(3, 4, 4)
        labels = torch.full((4, 4), 3)
        assert float(ssl_loss(labels, logits, logits, 3)) == 0.0

    def test_random_instance_frozen(self):
        rng = np.random.default_rng(13)
        l1 = rng.normal(size=(2, 3, 3))
        l2 = rng.normal(size=(2, 3, 3))
        labels = rng.integers(0, 3, size=(3, 3))
        expected = 0.9938915035364538  # frozen from composed references
        got = float(ssl_loss(t(labels, torch.long), t(l1), t(l2), 2))
        assert got == pytest.approx(expected, rel=1e-9)

    def test_total_weighted_sum(self):
        w = LossWeights()
        assert float(total_loss(t(1.0), t(0.4), t(0.5), w)) == pytest.approx(1.3, abs=1e-12)
        assert float(total_loss(t(0.0), t(0.0), t(0.0), w)) == 0.0
        w1 = LossWeights(0.5, 0.5, 0.5)
        assert float(total_loss(t(2.0), t(2.0), t(2.0), w1)) == pytest.approx(3.0, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(-1.0, 0.5, 0.2)


class TestScribbleMap:
    def test_validate_rejects_out_of_range(self):
        sm = ScribbleMap(np.array([[0, 7], [4, 4]]), unknown_code=4)
        with pytest.raises(DataError):
            sm.validate(num_classes=4)

    def test_annotated_fraction(self):
        sm = ScribbleMap(np.array([[0, 4], [4, 4]]), unknown_code=4)
        assert sm.annotated_fraction() == 0.25
