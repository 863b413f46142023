import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
import unittest
from unittest.mock import patch

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from PartAlign.align_graphmatch import CorrelationBank, Permutation
from PartAlign.errors import ConfigurationError, ProposalError, ShapeMismatchError, VariantStateError
from PartAlign.harness import SGD
from PartAlign.model import (
    AlignmentVariant,
    LossSettings,
    ModelConfig,
    TwoStreamNet,
    PartBox,
    backbone_forward,
    crop_and_resize,
    propose_parts,
)
from PartAlign.synthdata import SynthSpec, class_part_types, render_sample
from PartAlign.tensor_core import Tensor

CONFIG = ModelConfig.miniature()
MICRO_SPEC = SynthSpec(num_classes=2, parts_per_object=2, image_size=32, glyph_size=8, jitter_radius=2, train_count=8, test_count=2)
MICRO_CONFIG = ModelConfig(
    in_channels=3, image_size=32, widths=(2, 3, 4), head_channels=4, d_repr=8, num_classes=2, num_parts=2, window=1, activation="gelu", heads=2, expansion=2
)


def build(alignment: str = "none", seed: int = 0, layers: int = 1) -> TwoStreamNet:
    return TwoStreamNet(CONFIG, AlignmentVariant.parse(alignment, layers), np.random.default_rng(seed))


def images(count: int, seed: int = 0, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(count, 1, 32, 32)).astype(dtype)


class TestAlignmentVariant(unittest.TestCase):
    def test_parse_names(self):
        self.assertEqual(AlignmentVariant.parse("attn1"), AlignmentVariant("selfattn", 1))
        self.assertEqual(AlignmentVariant.parse("attn", layers=2).label, "attn2")
        self.assertEqual(AlignmentVariant.parse("crossattn").kind, "crossattn")
        self.assertEqual(AlignmentVariant.parse("GraphMatch").label, "graphmatch")

    def test_unknown_name(self):
        with self.assertRaises(ConfigurationError):
            AlignmentVariant.parse("hungarian")

    def test_layers_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            AlignmentVariant("selfattn", 0)


class TestBackbone(unittest.TestCase):
    def test_stage_resolutions(self):
        maps = backbone_forward(build(), images(2))
        self.assertEqual([m.shape for m in maps], [(2, 2, 8, 8), (2, 3, 4, 4), (2, 4, 2, 2)])

    def test_single_image_gets_batch_axis(self):
        maps = backbone_forward(build(), images(1)[0])
        self.assertEqual(maps[0].shape[0], 1)

    def test_rejects_wrong_image_size(self):
        with self.assertRaises(ShapeMismatchError):
            build().forward_test(np.zeros((1, 1, 16, 16), dtype=np.float32))

    def test_image_size_must_divide_by_total_stride(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig(image_size=60)


class TestProposer(unittest.TestCase):
    def test_returns_requested_boxes_inside_image(self):
        f3 = np.random.default_rng(0).uniform(size=(4, 4, 4))
        boxes = propose_parts(f3, num_parts=3, window=2, nms_iou=0.25, image_size=32)
        self.assertEqual(len(boxes), 3)
        for box in boxes:
            self.assertEqual(box.side, 16)
            self.assertTrue(0 <= box.row <= 16 and 0 <= box.col <= 16)
        scores = [box.score for box in boxes]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_single_bright_cell_gets_a_centred_box(self):
        f3 = np.zeros((2, 4, 4))
        f3[:, 2, 1] = 5.0
        (box,) = propose_parts(f3, num_parts=1, window=1, nms_iou=0.25, image_size=32)
        self.assertEqual((box.row + box.side / 2, box.col + box.side / 2), (2.5 * 8, 1.5 * 8))

    def test_two_distant_bright_cells_ranked_by_energy(self):
        f3 = np.zeros((2, 4, 4))
        f3[:, 0, 0] = 3.0
        f3[:, 3, 3] = 5.0
        boxes = propose_parts(f3, num_parts=2, window=1, nms_iou=0.25, image_size=32)
        self.assertEqual([(box.row, box.col) for box in boxes], [(24, 24), (0, 0)])
        self.assertGreater(boxes[0].score, boxes[1].score)

    def test_proposals_are_repeatable(self):
        f3 = np.random.default_rng(1).uniform(size=(3, 4, 4))
        self.assertEqual(
            propose_parts(f3, num_parts=3, window=2, nms_iou=0.25, image_size=32),
            propose_parts(f3, num_parts=3, window=2, nms_iou=0.25, image_size=32),
        )

    def test_equal_scores_keep_scan_order(self):
        boxes = propose_parts(np.zeros((2, 4, 4)), num_parts=2, window=1, nms_iou=0.25, image_size=32)
        self.assertEqual([(box.row, box.col) for box in boxes], [(0, 0), (0, 8)])

    def test_window_larger_than_map(self):
        with self.assertRaises(ProposalError):
            propose_parts(np.ones((2, 2, 2)), num_parts=1, window=3, nms_iou=0.25, image_size=32)

    def test_too_few_surviving_windows(self):
        with self.assertRaises(ProposalError):
            propose_parts(np.ones((2, 2, 2)), num_parts=2, window=2, nms_iou=0.25, image_size=32)

    def test_crop_and_resize(self):
        image = np.arange(32 * 32, dtype=np.float32).reshape(1, 32, 32)
        crop = crop_and_resize(image, PartBox(row=8, col=16, side=8, score=0.0), 32)
        self.assertEqual(crop.shape, (1, 32, 32))
        self.assertEqual(crop[0, 0, 0], image[0, 8, 16])
        self.assertEqual(crop[0, -1, -1], image[0, 15, 23])

    def test_crop_out_of_bounds(self):
        with self.assertRaises(ProposalError):
            crop_and_resize(np.zeros((1, 32, 32)), PartBox(row=20, col=0, side=16, score=0.0), 32)


class TestForwardTrain(unittest.TestCase):
    def test_loss_is_finite_and_gradients_reach_every_trained_parameter(self):
        for alignment in ("none", "attn1", "crossattn"):
            model = build(alignment)
            breakdown = model.forward_train(images(3), [0, 1, 2])
            self.assertTrue(np.isfinite(float(breakdown.total.data)))
            self.assertEqual(len(breakdown.per_stage_ce), 3)
            self.assertEqual(breakdown.global_logits.shape, (3, 3))
            breakdown.total.backward()
            for name, parameter in model.named_parameters():
                if name.startswith(("backbone.", "heads.")):
                    self.assertIsNotNone(parameter.grad, msg=f"{alignment}: {name}")

    def test_backbone_is_shared_between_streams(self):
        model = build("none")
        backbone_names = [name for name, _ in model.named_parameters() if name.startswith("backbone.")]
        self.assertEqual(len(backbone_names), 6)

        global_only = LossSettings(lambda_reg=0.0, lambda_part=0.0)
        model.forward_train(images(2), [0, 1], settings=global_only).total.backward()
        global_grad = model.backbone.stages[0].weight.grad.copy()
        model.zero_grad()
        model.forward_train(images(2), [0, 1]).total.backward()
        self.assertFalse(np.allclose(model.backbone.stages[0].weight.grad, global_grad))

    def test_label_count_must_match_batch(self):
        with self.assertRaises(ShapeMismatchError):
            build().forward_train(images(2), [0, 1, 2])

    def test_loss_decreases_on_two_class_micro_set(self):
        part_types = class_part_types(MICRO_SPEC)
        rendered = [render_sample(MICRO_SPEC, part_types, "train", index) for index in range(MICRO_SPEC.train_count)]
        batch = np.stack([image for image, _, _ in rendered]).astype(np.float64)
        labels = np.array([label for _, label, _ in rendered])
        model = TwoStreamNet(MICRO_CONFIG, AlignmentVariant("none", 1), np.random.default_rng(0)).astype(np.float64)
        optimizer = SGD(model.parameters(), lr=0.02, momentum=0.0)
        losses = []
        for _ in range(50):
            breakdown = model.forward_train(batch, labels)
            losses.append(float(breakdown.total.data))
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
        self.assertTrue(np.all(np.isfinite(losses)))
        self.assertLess(np.mean(losses[-10:]), np.mean(losses[:10]))
        self.assertLess(losses[-1], losses[0])

    def test_self_attention_loss_ignores_proposal_order(self):
        model = build("attn1").astype(np.float64)
        batch, labels = images(2, seed=3, dtype=np.float64), [0, 2]
        reference = float(model.forward_train(batch, labels).total.data)
        propose = model.propose
        with patch.object(model, "propose", side_effect=lambda f3: [list(reversed(boxes)) for boxes in propose(f3)]):
            reordered = float(model.forward_train(batch, labels).total.data)
        self.assertAlmostEqual(reordered, reference, places=10)

    def test_full_image_crop_reproduces_global_representation(self):
        model = build("none").astype(np.float64)
        batch = images(2, seed=5, dtype=np.float64)
        full = PartBox(row=0, col=0, side=32, score=0.0)
        tokens, _ = model.encode_parts(batch, [[full] * CONFIG.num_parts] * 2)
        _, representations, _ = model.global_pass(batch)
        for stage_tokens, representation in zip(tokens, representations):
            for n in range(CONFIG.num_parts):
                assert_allclose(stage_tokens.tokens.data[:, n], representation.data, rtol=1e-10, atol=1e-12)

    def test_identical_crops_give_identical_rows(self):
        model = build("none").astype(np.float64)
        box = PartBox(row=8, col=8, side=16, score=0.0)
        tokens, part_logits = model.encode_parts(images(1, seed=6, dtype=np.float64), [[box] * CONFIG.num_parts])
        for stage_tokens in tokens:
            assert_allclose(stage_tokens.tokens.data[0, 1], stage_tokens.tokens.data[0, 0], rtol=1e-12, atol=1e-14)
        assert_allclose(part_logits.data[0, 1], part_logits.data[0, 0], rtol=1e-12, atol=1e-14)


class TestVariantState(unittest.TestCase):
    def test_graphmatch_requires_bank(self):
        with self.assertRaises(VariantStateError):
            build("graphmatch").forward_train(images(1), [0])

    def test_bank_only_for_graphmatch(self):
        with self.assertRaises(VariantStateError):
            build("none").forward_train(images(1), [0], bank=CorrelationBank(num_parts=2))

    def test_attention_variant_on_unifier_model(self):
        with self.assertRaises(VariantStateError):
            build("none").forward_train(images(1), [0], variant=AlignmentVariant("selfattn", 1))

    def test_bank_size_must_match_parts(self):
        with self.assertRaises(VariantStateError):
            build("graphmatch").forward_train(images(1), [0], bank=CorrelationBank(num_parts=3))

    def test_bank_update_switch(self):
        model = build("graphmatch")
        frozen = CorrelationBank(num_parts=2)
        breakdown = model.forward_train(images(2), [0, 1], bank=frozen, update_bank=False)
        self.assertEqual(frozen.updates_seen, 0)
        self.assertEqual(breakdown.permutations, [Permutation.identity(2)] * 2)

        bank = CorrelationBank(num_parts=2)
        model.forward_train(images(2), [0, 1], bank=bank)
        self.assertEqual(bank.updates_seen, 1)
        self.assertEqual(bank.c_ref.shape, (2, 2))


class TestForwardTest(unittest.TestCase):
    def test_single_image_gives_class_vector(self):
        self.assertEqual(build().forward_test(images(1)[0]).shape, (3,))
        self.assertEqual(build().predict(images(4)).shape, (4,))

    def test_independent_of_alignment_parameters(self):
        for alignment in ("none", "attn1", "crossattn"):
            model = build(alignment, layers=2)
            batch = images(4, seed=2)
            before = model.forward_test(batch)
            for name, parameter in model.named_parameters():
                if name in model.alignment_parameter_names():
                    parameter.data = np.zeros_like(parameter.data)
            assert_array_equal(model.forward_test(batch), before)

    def test_accepts_tensor_input_and_leaves_no_gradients(self):
        model = build()
        batch = images(2)
        assert_array_equal(model.forward_test(Tensor(batch)), model.forward_test(batch))
        self.assertTrue(all(parameter.grad is None for parameter in model.parameters()))

    def test_matches_global_branch_of_training_pass(self):
        model = build("attn1")
        batch = images(3, seed=4)
        breakdown = model.forward_train(batch, [0, 1, 2])
        assert_array_equal(model.forward_test(batch), breakdown.global_logits)


if __name__ == "__main__":
    unittest.main()
