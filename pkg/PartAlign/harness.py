"""Training, evaluation and the benchmark matrix.

``cmd_train`` is deterministic for a fixed configuration: initialization
draws from ``default_rng(seed)``, the epoch order from
``default_rng([seed, epoch])`` and jitter from
``default_rng([seed, epoch, sample])``. Wall-clock time is kept out of
``metrics.jsonl`` (it goes to ``timings.jsonl`` and the run log) so that
two identical runs leave byte-identical metrics.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import orjson

from PartAlign.align_graphmatch import CorrelationBank
from PartAlign.checkpoint import build_bank, build_model, load_checkpoint, save_checkpoint
from PartAlign.config import RunConfig
from PartAlign.console_output import colorize, delta_color
from PartAlign.environment import BENCH_WORKERS_VARIABLE, get_integer_from_env
from PartAlign.errors import ConfigurationError, NonFiniteError, ShapeMismatchError
from PartAlign.json_functions import append_jsonl, load_json_entry, write_json
from PartAlign.losses import cross_entropy
from PartAlign.model import LossSettings, TwoStreamNet
from PartAlign.synthdata import SynthDataset, export_dataset, generate, iterate_batches
from PartAlign.tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
TIMINGS_NAME = "timings.jsonl"
SUMMARY_NAME = "summary.json"
EVAL_BATCH_SIZE = 64
BENCH_ROWS: tuple[str, ...] = ("none", "graphmatch", "attn3", "attn1", "crossattn")
BASELINE_ROW = "graphmatch"
BENCH_SEEDS: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class MetricsRecord:
    """One row per (epoch, split).

    ``loss_ce`` is the summed per-stage cross entropy of the global stream.
    Test rows carry no regularizer, so their ``loss_total`` equals ``loss_ce``.
    """

    epoch: int
    split: str
    loss_total: float
    loss_reg: float
    loss_ce: float
    accuracy: float
    wall_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    def metrics_entry(self) -> dict[str, Any]:
        entry = asdict(self)
        entry.pop("wall_time")
        return entry


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and a constant learning rate."""

    def __init__(self, parameters: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(parameter.data) for parameter in self.parameters]

    def zero_grad(self) -> None:
        for parameter in self.parameters:
            parameter.grad = None

    def step(self) -> None:
        for parameter, velocity in zip(self.parameters, self.velocity):
            if parameter.grad is None:
                continue
            velocity *= self.momentum
            velocity += parameter.grad
            parameter.data -= self.lr * velocity


@dataclass
class TrainResult:
    model: TwoStreamNet
    bank: CorrelationBank | None
    records: list[MetricsRecord]
    checkpoint: Path
    test_accuracy: float


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    num_samples: int

    @property
    def per_class_accuracy(self) -> list[float]:
        totals = self.confusion.sum(axis=1)
        return [float(self.confusion[c, c] / totals[c]) if totals[c] else 0.0 for c in range(len(totals))]

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "num_samples": self.num_samples,
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": self.per_class_accuracy,
        }


def _confusion(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> np.ndarray:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return confusion


def evaluate_global_stream(model: TwoStreamNet, dataset: SynthDataset, batch_size: int = EVAL_BATCH_SIZE) -> tuple[float, float]:
    """Summed per-stage cross entropy and accuracy of the fused logits, both averaged over ``dataset``."""
    total_ce, correct = 0.0, 0
    with no_grad():
        for images, labels in iterate_batches(dataset, batch_size, seed=0, epoch=0, shuffle=False):
            _, _, logits = model.global_pass(model.as_batch(images))
            total_ce += sum(float(cross_entropy(stage_logits, labels).data.sum()) for stage_logits in logits)
            fused = np.sum([stage_logits.data for stage_logits in logits], axis=0)
            correct += int(np.sum(np.argmax(fused, axis=-1) == labels))
    return total_ce / len(dataset), correct / len(dataset)


def _train_epoch(
    model: TwoStreamNet,
    optimizer: SGD,
    bank: CorrelationBank | None,
    dataset: SynthDataset,
    config: RunConfig,
    settings: LossSettings,
    epoch: int,
) -> tuple[float, float, float, float]:
    sums = np.zeros(3, dtype=np.float64)
    correct = 0
    batches = iterate_batches(dataset, config.batch_size, config.seed, epoch, shuffle=True, jitter_strength=config.effective_jitter)
    for batch_index, (images, labels) in enumerate(batches):
        try:
            breakdown = model.forward_train(images, labels, bank=bank, settings=settings)
            loss = breakdown.total.data.item()
            if not np.isfinite(loss):
                raise NonFiniteError(f"training loss at epoch {epoch}, batch {batch_index}")
        except NonFiniteError as error:
            logger.error(f"Aborting training: {error}", extra={"fields": {"epoch": epoch, "batch": batch_index}})
            raise
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        count = len(labels)
        sums += count * np.array([loss, breakdown.reg, sum(breakdown.per_stage_ce)])
        correct += int(np.sum(np.argmax(breakdown.global_logits, axis=-1) == labels))
    loss_total, loss_reg, loss_ce = sums / len(dataset)
    return float(loss_total), float(loss_reg), float(loss_ce), correct / len(dataset)


def cmd_train(
    config: RunConfig,
    out_dir: str | Path,
    train_set: SynthDataset | None = None,
    test_set: SynthDataset | None = None,
) -> TrainResult:
    """
    Train one model and write ``metrics.jsonl``, ``timings.jsonl``, the final checkpoint and ``summary.json``.

    Datasets default to ``generate(config.synth_spec())``.

    Raises:
        NonFiniteError: If the loss becomes NaN or infinite.
        OSError: If ``out_dir`` is not writable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_set is None or test_set is None:
        train_set, test_set = generate(config.synth_spec())
    metrics_path, timings_path = out_dir / METRICS_NAME, out_dir / TIMINGS_NAME
    for path in (metrics_path, timings_path, out_dir / SUMMARY_NAME):
        path.unlink(missing_ok=True)
    write_json(out_dir / "config.json", config.to_dict())

    model = build_model(config)
    bank = build_bank(config)
    optimizer = SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    settings = LossSettings(config.lambda_reg, config.lambda_part, config.tau, config.kl_direction)
    logger.info(
        f"Training {config.variant.label} (seed={config.seed}, jitter={config.jitter}) for {config.epochs} epochs",
        extra={"fields": {"parameters": model.num_parameters(), "out_dir": str(out_dir)}},
    )

    records: list[MetricsRecord] = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        loss_total, loss_reg, loss_ce, accuracy = _train_epoch(model, optimizer, bank, train_set, config, settings, epoch)
        train_time = time.perf_counter() - start
        test_ce, test_accuracy = evaluate_global_stream(model, test_set)
        test_time = time.perf_counter() - start - train_time
        epoch_records = [
            MetricsRecord(epoch, "train", loss_total, loss_reg, loss_ce, accuracy, train_time),
            MetricsRecord(epoch, "test", test_ce, 0.0, test_ce, test_accuracy, test_time),
        ]
        for item in epoch_records:
            append_jsonl(metrics_path, item.metrics_entry())
            append_jsonl(timings_path, {"epoch": item.epoch, "split": item.split, "wall_time": item.wall_time})
        records.extend(epoch_records)
        logger.info(
            f"Epoch {epoch}/{config.epochs}: loss {loss_total:.4f} (reg {loss_reg:.4f}), "
            f"train acc {accuracy:.3f}, test acc {test_accuracy:.3f}, {train_time:.1f}s",
            extra={"fields": {"epoch": epoch, "loss_total": loss_total, "test_accuracy": test_accuracy}},
        )
    metrics_path.touch()

    checkpoint = save_checkpoint(out_dir, model, config, bank, epoch=config.epochs)
    if records:
        test_accuracy = records[-1].accuracy
    else:
        test_accuracy = evaluate_global_stream(model, test_set)[1]
    write_json(out_dir / SUMMARY_NAME, {"completed": True, "config": config.to_dict(), "epochs": config.epochs, "test_accuracy": test_accuracy})
    return TrainResult(model=model, bank=bank, records=records, checkpoint=checkpoint, test_accuracy=test_accuracy)


def cmd_eval(checkpoint: str | Path, dataset: SynthDataset | None = None, batch_size: int = EVAL_BATCH_SIZE) -> EvalReport:
    """
    Accuracy and confusion counts of the global stream on ``dataset``.

    Without a dataset the test split of the checkpoint's own configuration
    is regenerated.

    Raises:
        CheckpointError: If the checkpoint cannot be rebuilt.
        ShapeMismatchError: If the images do not fit the model.
        ConfigurationError: If the labels exceed the model's classes.
    """
    model, config, _, _ = load_checkpoint(checkpoint)
    if dataset is None:
        _, dataset = generate(config.synth_spec())
    model_config = model.config
    expected = (model_config.in_channels, model_config.image_size, model_config.image_size)
    if dataset.images.shape[1:] != expected:
        raise ShapeMismatchError("cmd_eval", dataset.images.shape[1:], expected)
    if dataset.labels.max() >= model_config.num_classes:
        raise ConfigurationError(f"Dataset has labels up to {dataset.labels.max()}, model predicts {model_config.num_classes} classes")

    predictions = np.concatenate([
        model.predict(images) for images, _ in iterate_batches(dataset, batch_size, seed=0, epoch=0, shuffle=False)
    ])
    confusion = _confusion(dataset.labels, predictions, model_config.num_classes)
    report = EvalReport(accuracy=float(np.trace(confusion) / len(dataset)), confusion=confusion, num_samples=len(dataset))
    logger.info(f"Evaluated {checkpoint} on {len(dataset)} samples: accuracy {report.accuracy:.4f}")
    return report


# -- benchmark matrix ------------------------------------------------------------
@dataclass
class BenchCell:
    row: str
    jitter: bool
    seeds: list[int]
    accuracies: list[float]
    delta: float | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def spread(self) -> tuple[float, float]:
        return float(np.min(self.accuracies)), float(np.max(self.accuracies))

    def to_dict(self) -> dict[str, Any]:
        low, high = self.spread
        return {
            "row": self.row,
            "jitter": self.jitter,
            "seeds": self.seeds,
            "accuracies": self.accuracies,
            "mean": self.mean,
            "min": low,
            "max": high,
            "delta": self.delta,
        }


@dataclass
class BenchTable:
    baseline: str
    food_mode: bool
    cells: list[BenchCell] = field(default_factory=list)

    def cell(self, row: str, jitter: bool) -> BenchCell:
        return next(cell for cell in self.cells if cell.row == row and cell.jitter == jitter)

    def to_dict(self) -> dict[str, Any]:
        return {"baseline": self.baseline, "food_mode": self.food_mode, "cells": [cell.to_dict() for cell in self.cells]}

    def render(self, color: bool = False) -> str:
        lines = [f"{'variant':<12}{'jitter':<8}{'mean acc':>10}{'range':>18}{'delta':>10}"]
        for cell in self.cells:
            low, high = cell.spread
            spread = f"[{100 * low:.2f}, {100 * high:.2f}]"
            if cell.row == self.baseline:
                delta = f"{'baseline':>10}"
            elif cell.delta is None:
                delta = f"{'-':>10}"
            else:
                delta = f"{100 * cell.delta:>+10.2f}"
                if color:
                    delta = colorize(delta, delta_color(cell.delta))
            lines.append(f"{cell.row:<12}{('yes' if cell.jitter else 'no'):<8}{100 * cell.mean:>10.2f}{spread:>18}{delta}")
        return "\n".join(lines)


def _cell_dir(out_dir: Path, row: str, jitter: bool, seed: int) -> Path:
    return out_dir / f"{row}_{'jitter' if jitter else 'plain'}" / f"seed{seed}"


def _run_cell(job: tuple[dict[str, Any], str]) -> float:
    """Train one (row, jitter, seed) cell; a finished cell with the same configuration is reused."""
    config_payload, cell_dir = job
    summary = Path(cell_dir) / SUMMARY_NAME
    if load_json_entry(summary, "completed", False) and load_json_entry(summary, "config") == orjson.loads(orjson.dumps(config_payload)):
        logger.info(f"Reusing finished bench cell {cell_dir}")
        return float(load_json_entry(summary, "test_accuracy"))
    return cmd_train(RunConfig.from_dict(config_payload), cell_dir).test_accuracy


def cmd_bench(
    base_config: RunConfig,
    out_dir: str | Path,
    rows: Sequence[str] = BENCH_ROWS,
    seeds: Sequence[int] = BENCH_SEEDS,
    jitter_settings: Sequence[bool] = (False, True),
    workers: int | None = None,
) -> BenchTable:
    """
    Train every (row, jitter, seed) cell from ``base_config`` and tabulate test accuracy.

    All hyperparameters other than the alignment, the jitter switch and the
    seed are shared across cells. Deltas are ``mean(cell) - mean(baseline)``
    against the baseline cell with the same jitter setting.

    Args:
        workers: Parallel processes; defaults to PARTALIGN_BENCH_WORKERS (1).

    Writes ``bench.json`` and ``bench.txt`` to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not seeds or not rows or not jitter_settings:
        raise ConfigurationError("Bench needs at least one row, one seed and one jitter setting")
    workers = workers or get_integer_from_env(BENCH_WORKERS_VARIABLE, 1)

    keys, jobs = [], []
    for row in rows:
        for jitter in jitter_settings:
            for seed in seeds:
                config = base_config.with_overrides(alignment=row, jitter=jitter, seed=seed)
                keys.append((row, jitter))
                jobs.append((config.to_dict(), str(_cell_dir(out_dir, row, jitter, seed))))
    logger.info(f"Running {len(jobs)} bench runs ({len(rows)} rows x {len(jitter_settings)} jitter settings x {len(seeds)} seeds) on {workers} worker(s)")

    if workers > 1:
        with Pool(workers) as pool:
            accuracies = pool.map(_run_cell, jobs)
    else:
        accuracies = [_run_cell(job) for job in jobs]

    table = BenchTable(baseline=BASELINE_ROW, food_mode=base_config.food_mode)
    for row in rows:
        for jitter in jitter_settings:
            values = [accuracy for key, accuracy in zip(keys, accuracies) if key == (row, jitter)]
            table.cells.append(BenchCell(row=row, jitter=jitter, seeds=list(seeds), accuracies=values))
    if BASELINE_ROW in rows:
        for cell in table.cells:
            cell.delta = cell.mean - table.cell(BASELINE_ROW, cell.jitter).mean

    write_json(out_dir / "bench.json", table.to_dict())
    (out_dir / "bench.txt").write_text(table.render() + "\n")
    return table


def cmd_gen_data(config: RunConfig, out_dir: str | Path) -> list[Path]:
    """Export both splits of ``config.synth_spec()`` as manifest plus blob."""
    train_set, test_set = generate(config.synth_spec())
    manifests = [export_dataset(dataset, out_dir) for dataset in (train_set, test_set)]
    logger.info(f"Wrote {len(train_set)} train and {len(test_set)} test samples to {out_dir}")
    return manifests
