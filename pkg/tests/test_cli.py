import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
import io
import logging
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout

import orjson

from PartAlign.cli import build_parser, main
from PartAlign.config import miniature_run_config
from PartAlign.json_functions import read_json, read_jsonl, write_json


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)
        self.config_path = self.root / "run.json"
        write_json(self.config_path, miniature_run_config(epochs=1, alignment="attn1").to_dict())

    def tearDown(self):
        package_logger = logging.getLogger("PartAlign")
        for handler in list(package_logger.handlers):
            package_logger.removeHandler(handler)
            handler.close()
        self.directory.cleanup()

    def run_main(self, *argv: str) -> tuple[int, str]:
        with redirect_stdout(io.StringIO()) as output, redirect_stderr(io.StringIO()):
            code = main([str(arg) for arg in argv])
        return code, output.getvalue()

    def test_missing_required_flag_is_a_usage_error(self):
        with redirect_stderr(io.StringIO()), self.assertRaises(SystemExit) as raised:
            main(["train"])
        self.assertEqual(raised.exception.code, 1)

    def test_flags_mirror_run_config_fields(self):
        args = build_parser().parse_args(["train", "--out-dir", "x", "--attn-layers", "2", "--no-jitter", "--model", "d_repr=16", "--kl-direction", "global_target"])
        self.assertEqual((args.attn_layers, args.jitter, args.model, args.kl_direction), (2, False, [("d_repr", 16)], "global_target"))
        self.assertIsNone(args.lr)

    def test_unknown_configuration_key(self):
        write_json(self.config_path, {"learning_rate": 0.1})
        code, _ = self.run_main("train", "--out-dir", self.root / "run", "--config", self.config_path)
        self.assertEqual(code, 1)

    def test_invalid_log_level(self):
        code, _ = self.run_main("--log-level", "chatty", "train", "--out-dir", self.root / "run", "--config", self.config_path)
        self.assertEqual(code, 1)

    def test_train_with_config_file_and_overrides(self):
        out = self.root / "run"
        code, output = self.run_main(
            "train", "--out-dir", out, "--config", self.config_path, "--seed", "3", "--alignment", "none", "--synth", "train_count=16"
        )
        self.assertEqual(code, 0)
        self.assertIn("test accuracy", output)
        config = read_json(out / "config.json")
        self.assertEqual((config["seed"], config["alignment"], config["epochs"]), (3, "none", 1))
        self.assertEqual(config["synth"]["train_count"], 16)
        self.assertEqual(config["synth"]["image_size"], 32)
        self.assertEqual(len(list(read_jsonl(out / "metrics.jsonl"))), 2)
        with open(out / "run.log", "rb") as file:
            entries = [orjson.loads(line) for line in file.read().splitlines()]
        self.assertTrue(any(entry["message"].startswith("Epoch 1/1") for entry in entries))

    def test_eval_missing_checkpoint_is_an_io_error(self):
        code, _ = self.run_main("eval", "--checkpoint", self.root / "absent")
        self.assertEqual(code, 3)

    def test_gen_data_then_eval(self):
        code, _ = self.run_main("train", "--out-dir", self.root / "run", "--config", self.config_path, "--epochs", "0")
        self.assertEqual(code, 0)
        code, output = self.run_main("gen-data", "--out-dir", self.root / "data", "--config", self.config_path)
        self.assertEqual(code, 0)
        self.assertIn("test.json", output)
        report = self.root / "report.json"
        code, output = self.run_main(
            "eval", "--checkpoint", self.root / "run", "--dataset", self.root / "data" / "test.json", "--report", report
        )
        self.assertEqual(code, 0)
        self.assertIn("accuracy", output)
        self.assertEqual(read_json(report)["num_samples"], 12)

    def test_mismatched_dataset_is_a_usage_error(self):
        self.run_main("train", "--out-dir", self.root / "run", "--config", self.config_path, "--epochs", "0")
        self.run_main("gen-data", "--out-dir", self.root / "data", "--config", self.config_path, "--synth", "image_size=64")
        code, _ = self.run_main("eval", "--checkpoint", self.root / "run", "--dataset", self.root / "data" / "test.json")
        self.assertEqual(code, 1)


if __name__ == "__main__":
    unittest.main()
