import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
import unittest

import numpy as np
from numpy.testing import assert_allclose

from PartAlign.align_attention import PartTokens
from PartAlign.errors import NonFiniteError, ShapeMismatchError
from PartAlign.losses import GlobalRepr, UnifierPhi, cross_entropy, kl_div, reg_loss, total_loss
from PartAlign.tensor_core import Tensor, grad_check


def logits(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape))


class TestKLDivergence(unittest.TestCase):
    def test_identical_distributions_have_zero_divergence(self):
        p = logits(np.random.default_rng(0), 10, 6)
        assert_allclose(kl_div(p, p).data, 0.0, atol=1e-9)

    def test_divergence_is_non_negative(self):
        rng = np.random.default_rng(1)
        values = kl_div(logits(rng, 1000, 6), logits(rng, 1000, 6)).data
        self.assertTrue(np.all(values >= -1e-12))

    def test_two_bin_closed_form(self):
        p = Tensor(np.array([0.0, np.log(3.0)]))
        q = Tensor(np.array([0.0, 0.0]))
        expected = 0.25 * np.log(0.25 / 0.5) + 0.75 * np.log(0.75 / 0.5)
        self.assertAlmostEqual(float(kl_div(p, q).data), expected, places=12)

    def test_half_half_against_quarter_three_quarters(self):
        p = Tensor(np.array([0.0, 0.0]))
        q = Tensor(np.array([0.0, np.log(3.0)]))
        self.assertAlmostEqual(float(kl_div(p, q).data), 0.1438, places=4)

    def test_temperature_scales_logits(self):
        rng = np.random.default_rng(2)
        p, q = logits(rng, 4, 5), logits(rng, 4, 5)
        assert_allclose(kl_div(p, q, tau=2.5).data, kl_div(p / 2.5, q / 2.5).data, rtol=1e-12)

    def test_rejects_non_positive_temperature(self):
        p = logits(np.random.default_rng(3), 3)
        for tau in (0.0, -1.0):
            with self.assertRaises(ValueError):
                kl_div(p, p, tau=tau)

    def test_non_finite_input_raises(self):
        p = Tensor(np.array([0.0, np.nan, 1.0]))
        with self.assertRaises(NonFiniteError):
            kl_div(p, Tensor(np.zeros(3)))

    def test_shape_mismatch(self):
        rng = np.random.default_rng(4)
        with self.assertRaises(ShapeMismatchError):
            kl_div(logits(rng, 3), logits(rng, 4))


class TestCrossEntropy(unittest.TestCase):
    def test_two_class_example(self):
        self.assertAlmostEqual(float(cross_entropy(Tensor(np.array([2.0, 0.0])), 1).data), 2.1269, places=4)

    def test_uniform_logits_give_log_of_class_count(self):
        self.assertAlmostEqual(float(cross_entropy(Tensor(np.zeros(4)), 3).data), np.log(4.0), places=12)

    def test_one_value_per_sample(self):
        values = cross_entropy(Tensor(np.zeros((5, 4))), np.arange(5) % 4)
        self.assertEqual(values.shape, (5,))


class TestRegLoss(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        self.global_stages = [logits(rng, 4, 6) for _ in range(3)]
        self.unified_stages = [logits(rng, 4, 6) for _ in range(3)]

    def test_sum_of_per_stage_terms(self):
        expected = sum(float(kl_div(u, g).data.mean()) for g, u in zip(self.global_stages, self.unified_stages))
        self.assertAlmostEqual(float(reg_loss(GlobalRepr(self.global_stages), self.unified_stages).data), expected, places=12)

    def test_direction_flag_swaps_arguments(self):
        expected = sum(float(kl_div(g, u).data.mean()) for g, u in zip(self.global_stages, self.unified_stages))
        value = reg_loss(self.global_stages, self.unified_stages, kl_direction="global_target")
        self.assertAlmostEqual(float(value.data), expected, places=12)

    def test_unknown_direction(self):
        with self.assertRaises(ValueError):
            reg_loss(self.global_stages, self.unified_stages, kl_direction="symmetric")

    def test_stage_count_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            reg_loss(self.global_stages, self.unified_stages[:2])

    def test_global_repr_requires_one_width(self):
        rng = np.random.default_rng(6)
        with self.assertRaises(ShapeMismatchError):
            GlobalRepr([logits(rng, 2, 6), logits(rng, 2, 5)])

    def test_gradient_check(self):
        rng = np.random.default_rng(7)
        inputs = [logits(rng, 3, 5), logits(rng, 3, 5)]
        report = grad_check(lambda g, u: reg_loss([g], [u], tau=1.5), inputs)
        self.assertTrue(report.passed, msg=f"max relative error {report.max_rel_err}")


class TestTotalLoss(unittest.TestCase):
    def test_stage_terms_add_up(self):
        rng = np.random.default_rng(8)
        labels = np.array([0, 2, 1])
        stages = [logits(rng, 3, 4) for _ in range(3)]
        parts = logits(rng, 3, 2, 4)
        expected = sum(float(cross_entropy(s, labels).data.mean()) for s in stages)
        expected += 0.5 * float(cross_entropy(parts, labels[:, None]).data.sum(axis=-1).mean())
        expected += 2.0 * 0.3
        value = total_loss(stages, parts, 0.3, labels, lambda_reg=2.0, lambda_part=0.5)
        self.assertAlmostEqual(float(value.data), expected, places=12)

    def test_part_sequence_matches_stacked_tensor(self):
        rng = np.random.default_rng(9)
        labels = np.array([1, 3])
        stages = [logits(rng, 2, 4)]
        stacked = rng.normal(size=(2, 3, 4))
        from_tensor = total_loss(stages, Tensor(stacked), 0.0, labels)
        from_list = total_loss(stages, [Tensor(stacked[:, n]) for n in range(3)], 0.0, labels)
        self.assertAlmostEqual(float(from_tensor.data), float(from_list.data), places=12)

    def test_zero_weights_leave_global_cross_entropy(self):
        rng = np.random.default_rng(10)
        stage = logits(rng, 5)
        value = total_loss([stage], [logits(rng, 5)], 7.0, 2, lambda_reg=0.0, lambda_part=0.0)
        self.assertAlmostEqual(float(value.data), float(cross_entropy(stage, 2).data), places=12)

    def test_label_out_of_range(self):
        rng = np.random.default_rng(11)
        with self.assertRaises(ValueError):
            total_loss([logits(rng, 2, 3)], [logits(rng, 2, 3)], 0.0, np.array([0, 3]))

    def test_negative_weight(self):
        rng = np.random.default_rng(12)
        with self.assertRaises(ValueError):
            total_loss([logits(rng, 3)], [logits(rng, 3)], 0.0, 0, lambda_reg=-1.0)


class TestUnifierPhi(unittest.TestCase):
    def test_output_width(self):
        phi = UnifierPhi(3, 4, 5, 12, np.random.default_rng(0))
        out = phi(PartTokens(stage=2, tokens=Tensor(np.ones((2, 3, 4), dtype=np.float32))))
        self.assertEqual(out.shape, (2, 5))

    def test_rejects_wrong_part_count(self):
        phi = UnifierPhi(3, 4, 5, 12, np.random.default_rng(0))
        with self.assertRaises(ShapeMismatchError):
            phi(PartTokens(stage=2, tokens=Tensor(np.ones((4, 4), dtype=np.float32))))

    def test_depends_on_part_order(self):
        phi = UnifierPhi(3, 4, 5, 12, np.random.default_rng(1)).astype(np.float64)
        parts = np.random.default_rng(2).normal(size=(3, 4))
        first = phi(PartTokens(stage=1, tokens=Tensor(parts))).data
        second = phi(PartTokens(stage=1, tokens=Tensor(parts[[2, 0, 1]]))).data
        self.assertFalse(np.allclose(first, second))


if __name__ == "__main__":
    unittest.main()
