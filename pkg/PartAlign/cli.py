"""Command-line entry point: ``partalign {train,eval,bench,gradcheck,gen-data}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(non-finite loss or a failed gradient check), 3 I/O or checkpoint error.
"""
import argparse
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Sequence

import orjson

from PartAlign.config import RunConfig, load_run_config
from PartAlign.console_output import print_in_color
from PartAlign.environment import LOG_LEVEL_VARIABLE, get_log_directory, get_string_from_env
from PartAlign.errors import (
    CheckpointError,
    ConfigurationError,
    EnvironmentVariableNotFoundError,
    NonFiniteError,
    ShapeMismatchError,
)
from PartAlign.gradcheck import COMPONENTS, GRADCHECK_SEEDS, render_report, run_gradcheck
from PartAlign.harness import BENCH_ROWS, BENCH_SEEDS, cmd_bench, cmd_eval, cmd_gen_data, cmd_train
from PartAlign.json_functions import write_json
from PartAlign.logger import Logger
from PartAlign.synthdata import load_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _key_value(text: str) -> tuple[str, Any]:
    key, separator, raw = text.partition("=")
    if not separator or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got '{text}'")
    try:
        return key.replace("-", "_"), orjson.loads(raw)
    except orjson.JSONDecodeError:
        return key.replace("-", "_"), raw


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    """One kebab-case flag per RunConfig field; unset flags leave the config file or default in place."""
    group = parser.add_argument_group("run configuration")
    group.add_argument("--config", type=Path, help="JSON RunConfig; explicit flags take precedence")
    for item in fields(RunConfig):
        flag = f"--{item.name.replace('_', '-')}"
        default = item.default if item.default is not MISSING else item.default_factory()
        if isinstance(default, bool):
            group.add_argument(flag, dest=item.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, dict):
            group.add_argument(flag, dest=item.name, type=_key_value, action="append", metavar="KEY=VALUE", help=f"{item.name} override, repeatable")
        else:
            group.add_argument(flag, dest=item.name, type=type(default), default=None, help=f"default: {default}")


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    for item in fields(RunConfig):
        value = getattr(args, item.name, None)
        if value is None:
            continue
        overrides[item.name] = dict(value) if isinstance(value, list) else value
    if args.config is not None:
        base = load_run_config(args.config).to_dict()
        for key in ("synth", "model"):
            if key in overrides:
                overrides[key] = {**base[key], **overrides[key]}
    return load_run_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partalign", description="Part-alignment experiments on synthetic fine-grained data.")
    parser.add_argument("--log-level", default=None, help=f"console log level (default: ${LOG_LEVEL_VARIABLE} or info)")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = commands.add_parser("train", help="train one model")
    train.add_argument("--out-dir", type=Path, required=True)
    _add_run_config_flags(train)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint with the global stream")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", type=Path, help="dataset manifest from gen-data (default: regenerate the test split)")
    evaluate.add_argument("--report", type=Path, help="write the report as JSON")

    bench = commands.add_parser("bench", help="run the alignment x jitter matrix")
    bench.add_argument("--out-dir", type=Path, required=True)
    bench.add_argument("--rows", nargs="+", default=list(BENCH_ROWS))
    bench.add_argument("--seeds", nargs="+", type=int, default=list(BENCH_SEEDS))
    bench.add_argument("--jitter-axis", nargs="+", choices=("off", "on"), default=["off", "on"])
    bench.add_argument("--workers", type=int, default=None)
    _add_run_config_flags(bench)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every differentiable component")
    gradcheck.add_argument("--components", nargs="+", choices=sorted(COMPONENTS), default=None)
    gradcheck.add_argument("--num-seeds", type=int, default=len(GRADCHECK_SEEDS))

    gen_data = commands.add_parser("gen-data", help="export the synthetic dataset")
    gen_data.add_argument("--out-dir", type=Path, required=True)
    _add_run_config_flags(gen_data)
    return parser


def _configure_logging(args: argparse.Namespace, log_file: Path | None = None) -> Logger:
    log_level = args.log_level or get_string_from_env(LOG_LEVEL_VARIABLE, "info")
    if log_file is None:
        log_directory = get_log_directory()
        log_file = log_directory / f"partalign_{args.command}.log" if log_directory is not None else None
    try:
        return Logger(name="PartAlign", log_file=log_file, log_level=log_level)
    except ValueError as error:
        raise UsageError(str(error)) from error


def _train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    _configure_logging(args, args.out_dir / "run.log")
    result = cmd_train(config, args.out_dir)
    print(f"checkpoint: {result.checkpoint}")
    print(f"test accuracy: {result.test_accuracy:.4f}")
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    _configure_logging(args)
    dataset = load_dataset(args.dataset) if args.dataset is not None else None
    report = cmd_eval(args.checkpoint, dataset)
    print(f"accuracy: {report.accuracy:.4f} ({report.num_samples} samples)")
    for label, row in enumerate(report.confusion):
        print(f"  class {label}: {' '.join(f'{count:4d}' for count in row)}")
    if args.report is not None:
        write_json(args.report, report.to_dict())
    return EXIT_OK


def _bench(args: argparse.Namespace) -> int:
    config = _run_config(args)
    _configure_logging(args, args.out_dir / "bench.log")
    jitter_settings = [setting == "on" for setting in args.jitter_axis]
    table = cmd_bench(config, args.out_dir, rows=args.rows, seeds=args.seeds, jitter_settings=jitter_settings, workers=args.workers)
    print(table.render(color=True))
    return EXIT_OK


def _gradcheck(args: argparse.Namespace) -> int:
    _configure_logging(args)
    if args.num_seeds < 1:
        raise UsageError("--num-seeds must be at least 1")
    results = run_gradcheck(args.components, seeds=tuple(range(args.num_seeds)))
    print(render_report(results))
    if all(result.passed for result in results):
        return EXIT_OK
    print_in_color("Gradient check failed", "red")
    return EXIT_NUMERIC


def _gen_data(args: argparse.Namespace) -> int:
    config = _run_config(args)
    _configure_logging(args)
    for manifest in cmd_gen_data(config, args.out_dir):
        print(manifest)
    return EXIT_OK


HANDLERS = {"train": _train, "eval": _eval, "bench": _bench, "gradcheck": _gradcheck, "gen-data": _gen_data}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (UsageError, ConfigurationError, EnvironmentVariableNotFoundError, ShapeMismatchError) as error:
        logger.error(str(error))
        print_in_color(f"error: {error}", "red")
        return EXIT_USAGE
    except NonFiniteError as error:
        logger.error(str(error))
        print_in_color(f"numeric failure: {error}", "red")
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as error:
        logger.error(str(error))
        print_in_color(f"I/O failure: {error}", "red")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
