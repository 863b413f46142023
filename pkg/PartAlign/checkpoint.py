"""Checkpoint I/O: a JSON manifest plus one flat little-endian float blob.

The blob holds every model parameter in manifest order followed by the
correlation bank reference (graph-matching runs only). The blob dtype
follows the run precision.
"""
import logging
from pathlib import Path

import numpy as np

from PartAlign.align_graphmatch import CorrelationBank
from PartAlign.config import RunConfig
from PartAlign.errors import CheckpointError, ConfigurationError
from PartAlign.json_functions import read_json, write_json
from PartAlign.model import TwoStreamNet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "checkpoint.json"
BLOB_NAME = "checkpoint.bin"
BLOB_DTYPES = {"float32": "<f4", "float64": "<f8"}


def build_model(config: RunConfig) -> TwoStreamNet:
    """Fresh model for ``config``; initialization draws from ``default_rng(seed)``."""
    model = TwoStreamNet(config.model_config(), config.variant, np.random.default_rng(config.seed))
    return model.astype(config.dtype)


def build_bank(config: RunConfig) -> CorrelationBank | None:
    if config.variant.kind != "graphmatch":
        return None
    return CorrelationBank(num_parts=config.num_parts, ema_rate=config.ema_rate)


def _resolve(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() or path.suffix != ".json" else path


def save_checkpoint(path: str | Path, model: TwoStreamNet, config: RunConfig, bank: CorrelationBank | None = None, epoch: int = 0) -> Path:
    """
    Write ``checkpoint.json`` and ``checkpoint.bin``.

    Args:
        path: Output directory, or the manifest path itself.
        model: Model whose parameters are stored in ``named_parameters`` order.
        config: Run configuration, stored verbatim for provenance and rebuilding.
        bank: Correlation bank of a graph-matching run.
        epoch: Number of completed epochs.

    Returns:
        Path of the manifest.
    """
    manifest_path = _resolve(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_dtype = BLOB_DTYPES[config.precision]

    chunks, tensors, offset = [], [], 0
    for name, parameter in model.named_parameters():
        chunks.append(np.ascontiguousarray(parameter.data, dtype=blob_dtype).reshape(-1))
        tensors.append({"name": name, "shape": list(parameter.shape), "offset": offset})
        offset += parameter.data.size

    bank_entry = None
    if bank is not None:
        bank_entry = {"num_parts": bank.num_parts, "ema_rate": bank.ema_rate, "updates_seen": bank.updates_seen, "offset": None}
        if bank.c_ref is not None:
            bank_entry["offset"] = offset
            chunks.append(np.ascontiguousarray(bank.c_ref, dtype=blob_dtype).reshape(-1))
            offset += bank.c_ref.size

    with open(file=manifest_path.parent / BLOB_NAME, mode="wb") as file:
        file.write(np.concatenate(chunks).tobytes() if chunks else b"")

    write_json(manifest_path, {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "blob": BLOB_NAME,
        "dtype": blob_dtype,
        "count": offset,
        "epoch": epoch,
        "variant": config.variant.label,
        "config": config.to_dict(),
        "tensors": tensors,
        "bank": bank_entry,
    })
    logger.debug(f"Checkpoint written to {manifest_path} ({offset} values)")
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[TwoStreamNet, RunConfig, CorrelationBank | None, int]:
    """
    Rebuild model, configuration, bank and epoch count from a checkpoint.

    Raises:
        CheckpointError: On an unknown format version, a blob of the wrong
            size, or tensors that do not fit the rebuilt model.
        OSError: If the files cannot be read.
    """
    manifest_path = _resolve(path)
    manifest = read_json(manifest_path)
    if not isinstance(manifest, dict) or manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(manifest_path, f"Unsupported checkpoint format in {manifest_path}")
    try:
        config = RunConfig.from_dict(manifest["config"])
    except (ConfigurationError, KeyError) as error:
        raise CheckpointError(manifest_path, f"Checkpoint configuration is invalid: {error}") from error

    blob = np.fromfile(manifest_path.parent / manifest["blob"], dtype=manifest["dtype"])
    if blob.size != manifest["count"]:
        raise CheckpointError(manifest_path, f"Blob holds {blob.size} values, manifest expects {manifest['count']}")

    model = build_model(config)
    state = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"]))
        state[entry["name"]] = blob[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as error:
        raise CheckpointError(manifest_path, f"Checkpoint tensors do not fit the model: {error}") from error

    bank = None
    if manifest["bank"] is not None:
        entry = manifest["bank"]
        c_ref = None
        if entry["offset"] is not None:
            n = entry["num_parts"]
            c_ref = blob[entry["offset"] : entry["offset"] + n * n].reshape(n, n).astype(np.float64)
        bank = CorrelationBank(num_parts=entry["num_parts"], ema_rate=entry["ema_rate"], c_ref=c_ref, updates_seen=entry["updates_seen"])
    return model, config, bank, int(manifest["epoch"])
