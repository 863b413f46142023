import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from PartAlign.align_attention import (
    AttentionParams,
    AttnAligner,
    CrossAttnAligner,
    PartTokens,
    TransformerBlock,
    align_cross_attn,
    align_self_attn,
    transformer_block,
)
from PartAlign.errors import ConfigurationError, ShapeMismatchError
from PartAlign.losses import UnifierPhi
from PartAlign.tensor_core import Module, Tensor, grad_check, sum_over_axis


def randomize(module: Module, seed: int, dtype=np.float32, scale: float = 0.3) -> Module:
    """Replace every parameter with random values so that residual branches are active."""
    rng = np.random.default_rng(seed)
    for parameter in module.parameters():
        parameter.data = rng.normal(scale=scale, size=parameter.shape).astype(dtype)
    return module


def tokens(rng: np.random.Generator, *shape: int, dtype=np.float32) -> PartTokens:
    return PartTokens(stage=1, tokens=Tensor(rng.normal(size=shape).astype(dtype)))


class TestSelfAttentionAligner(unittest.TestCase):
    def setUp(self):
        self.aligner = randomize(AttnAligner(8, 6, np.random.default_rng(0), num_layers=3, heads=2, expansion=4), seed=1)

    def test_output_width_and_batching(self):
        out = align_self_attn(tokens(np.random.default_rng(2), 5, 4, 8), self.aligner)
        self.assertEqual(out.shape, (5, 6))

    def test_invariant_to_part_order_in_single_precision(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            parts = tokens(rng, 4, 8)
            order = rng.permutation(4)
            reference = align_self_attn(parts, self.aligner).data
            shuffled = align_self_attn(PartTokens(stage=1, tokens=Tensor(parts.tokens.data[order])), self.aligner).data
            self.assertTrue(np.all(np.abs(shuffled - reference) <= 1e-5 * (1.0 + np.abs(reference))))

    def test_invariant_to_part_order_in_double_precision(self):
        aligner = randomize(AttnAligner(8, 6, np.random.default_rng(0), num_layers=3, heads=2), seed=4, dtype=np.float64)
        rng = np.random.default_rng(5)
        parts = tokens(rng, 5, 8, dtype=np.float64)
        order = rng.permutation(5)
        reference = align_self_attn(parts, aligner).data
        shuffled = align_self_attn(PartTokens(stage=1, tokens=Tensor(parts.tokens.data[order])), aligner).data
        assert_allclose(shuffled, reference, rtol=0.0, atol=1e-10)

    def test_single_part_is_blocks_then_mlp(self):
        parts = tokens(np.random.default_rng(6), 1, 8)
        x = parts.tokens
        for block in self.aligner.blocks:
            x = transformer_block(x, block)
        expected = self.aligner.pool_mlp(Tensor(x.data[0])).data
        assert_allclose(align_self_attn(parts, self.aligner).data, expected, rtol=1e-6)

    def test_repeated_calls_are_bitwise_identical(self):
        parts = tokens(np.random.default_rng(7), 3, 4, 8)
        assert_array_equal(self.aligner(parts).data, self.aligner(parts).data)

    def test_rejects_wrong_token_width(self):
        with self.assertRaises(ShapeMismatchError):
            align_self_attn(tokens(np.random.default_rng(8), 4, 7), self.aligner)

    def test_pool_mlp_is_lighter_than_unifier(self):
        rng = np.random.default_rng(9)
        for num_parts in (2, 4, 8):
            aligner = AttnAligner(32, 32, rng)
            phi = UnifierPhi(num_parts, 32, 32, 4 * 32, rng)
            self.assertLess(aligner.pool_mlp.num_parameters(), phi.num_parameters())

    def test_gradient_into_tokens_matches_finite_differences(self):
        aligner = randomize(AttnAligner(8, 6, np.random.default_rng(0), num_layers=2, heads=2, expansion=2), seed=10, dtype=np.float64)
        weights = Tensor(np.random.default_rng(11).normal(size=(6,)))
        x = Tensor(np.random.default_rng(12).normal(size=(3, 8)))
        report = grad_check(lambda t: sum_over_axis(align_self_attn(PartTokens(stage=1, tokens=t), aligner) * weights), x)
        self.assertTrue(report.passed, msg=f"max relative error {report.max_rel_err}")


class TestBlocks(unittest.TestCase):
    def test_fresh_block_is_identity(self):
        block = TransformerBlock(8, 2, 4, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8)).astype(np.float32))
        assert_array_equal(transformer_block(x, block).data, x.data)

    def test_heads_must_divide_width(self):
        with self.assertRaises(ConfigurationError):
            AttentionParams(10, 4, np.random.default_rng(0))

    def test_aligner_needs_at_least_one_layer(self):
        with self.assertRaises(ConfigurationError):
            AttnAligner(8, 8, np.random.default_rng(0), num_layers=0)


class TestCrossAttentionAligner(unittest.TestCase):
    def setUp(self):
        self.aligner = randomize(CrossAttnAligner(6, 8, 5, np.random.default_rng(0), num_layers=3, heads=2), seed=1)

    def test_output_shape(self):
        rng = np.random.default_rng(2)
        out = align_cross_attn(Tensor(rng.normal(size=(3, 6)).astype(np.float32)), tokens(rng, 3, 4, 8), self.aligner)
        self.assertEqual(out.shape, (3, 5))

    def test_invariant_to_part_order(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            global_repr = Tensor(rng.normal(size=(6,)).astype(np.float32))
            parts = tokens(rng, 4, 8)
            order = rng.permutation(4)
            reference = align_cross_attn(global_repr, parts, self.aligner).data
            shuffled = align_cross_attn(global_repr, PartTokens(stage=1, tokens=Tensor(parts.tokens.data[order])), self.aligner).data
            self.assertTrue(np.all(np.abs(shuffled - reference) <= 1e-5 * (1.0 + np.abs(reference))))

    def test_depends_on_global_query(self):
        rng = np.random.default_rng(4)
        parts = tokens(rng, 4, 8)
        first = align_cross_attn(Tensor(rng.normal(size=(6,)).astype(np.float32)), parts, self.aligner).data
        second = align_cross_attn(Tensor(rng.normal(size=(6,)).astype(np.float32)), parts, self.aligner).data
        self.assertFalse(np.allclose(first, second))

    def test_rejects_mismatched_batch(self):
        rng = np.random.default_rng(5)
        with self.assertRaises(ShapeMismatchError):
            align_cross_attn(Tensor(rng.normal(size=(2, 6))), tokens(rng, 3, 4, 8), self.aligner)

    def test_gradient_check(self):
        aligner = randomize(CrossAttnAligner(6, 8, 5, np.random.default_rng(0), num_layers=2, heads=2, expansion=2), seed=6, dtype=np.float64)
        rng = np.random.default_rng(7)
        weights = Tensor(rng.normal(size=(5,)))
        inputs = [Tensor(rng.normal(size=(6,))), Tensor(rng.normal(size=(3, 8)))]
        report = grad_check(lambda g, t: sum_over_axis(align_cross_attn(g, PartTokens(stage=1, tokens=t), aligner) * weights), inputs)
        self.assertTrue(report.passed, msg=f"max relative error {report.max_rel_err}")


if __name__ == "__main__":
    unittest.main()
