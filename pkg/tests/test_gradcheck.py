import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
import io
import unittest
from contextlib import redirect_stdout
from unittest.mock import patch

from PartAlign.cli import main
from PartAlign.gradcheck import COMPONENTS, ComponentResult, render_report, run_gradcheck
from PartAlign.tensor_core import GRADIENT_RULES

ORIGINAL_GELU_RULE = GRADIENT_RULES["gelu"]


def scaled_gelu_rule(ctx, grad):
    return tuple(g * 1.01 for g in ORIGINAL_GELU_RULE(ctx, grad))


class TestComponents(unittest.TestCase):
    def test_every_component_is_registered(self):
        for name in ("matmul", "softmax", "layer_norm", "conv2d", "mhsa", "align_self_attn", "align_cross_attn", "unifier_phi", "kl_div", "total_loss"):
            self.assertIn(name, COMPONENTS)
        self.assertEqual(sorted(name for name in COMPONENTS if name.startswith("end_to_end_")), [
            "end_to_end_crossattn", "end_to_end_graphmatch", "end_to_end_none", "end_to_end_selfattn",
        ])

    def test_all_components_within_tolerance(self):
        results = run_gradcheck()
        self.assertTrue(all(result.seeds == 10 for result in results))
        self.assertEqual([result.name for result in results], list(COMPONENTS))
        failures = {result.name: result.max_rel_err for result in results if not result.passed}
        self.assertEqual(failures, {})
        self.assertTrue(all(result.coordinates_checked > 0 for result in results))

    def test_end_to_end_respects_coordinate_limit(self):
        (result,) = run_gradcheck(["end_to_end_none"], seeds=(0,))
        self.assertEqual(result.coordinates_checked, 4 * 6)

    def test_unknown_component(self):
        with self.assertRaises(KeyError):
            run_gradcheck(["softplus"])

    def test_scaled_rule_is_caught(self):
        with patch.dict(GRADIENT_RULES, {"gelu": scaled_gelu_rule}):
            results = run_gradcheck(["gelu", "exp"], seeds=(0,))
        self.assertFalse(results[0].passed)
        self.assertGreater(results[0].max_rel_err, 1e-3)
        self.assertTrue(results[1].passed)

    def test_report_lists_each_component(self):
        results = [ComponentResult("exp", 1e-9, True, 1, 20), ComponentResult("gelu", 1e-2, False, 1, 20)]
        report = render_report(results, color=False)
        self.assertIn("exp", report)
        self.assertIn("FAIL", report)
        self.assertTrue(report.endswith("1/2 components within tolerance"))


class TestGradcheckCommand(unittest.TestCase):
    def test_exit_codes(self):
        with redirect_stdout(io.StringIO()) as output:
            self.assertEqual(main(["gradcheck", "--components", "exp", "softmax", "--num-seeds", "2"]), 0)
        self.assertIn("2/2 components within tolerance", output.getvalue())
        with redirect_stdout(io.StringIO()), patch.dict(GRADIENT_RULES, {"gelu": scaled_gelu_rule}):
            self.assertEqual(main(["gradcheck", "--components", "gelu", "--num-seeds", "1"]), 2)


if __name__ == "__main__":
    unittest.main()
