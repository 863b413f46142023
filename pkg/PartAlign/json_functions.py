import os
import orjson
from pathlib import Path
from typing import Any, Iterator

MANIFEST_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
RECORD_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def write_json(path: str | Path, payload: Any) -> None:
    """
    Write a JSON document with sorted keys and two-space indentation.

    Sorted keys make the bytes depend only on the content, so writing the
    same payload twice yields identical files (checkpoint manifests, bench
    tables, dataset manifests).

    Args:
        path (str | Path): Destination file. Parent directories are created.
        payload (Any): Anything orjson can serialize, numpy arrays included.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(file=path, mode="wb") as file:
        file.write(orjson.dumps(payload, option=MANIFEST_OPTIONS) + b"\n")


def read_json(path: str | Path) -> Any:
    with open(file=Path(path), mode="rb") as file:
        return orjson.loads(file.read())


def append_jsonl(path: str | Path, record: dict[str, Any]) -> None:
    """Append one compact JSON object as a line."""
    with open(file=Path(path), mode="ab") as file:
        file.write(orjson.dumps(record, option=RECORD_OPTIONS) + b"\n")


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(file=Path(path), mode="rb") as file:
        for line in file:
            if line.strip():
                yield orjson.loads(line)


def load_json_entry(json_path: str | Path, entry_name: str, default: Any = None) -> Any:
    """
    Read a single entry from a JSON file without raising.

    Used to check run summaries (for example whether a bench cell already
    finished). Returns ``default`` if the file does not exist, cannot be
    decoded, cannot be read, or lacks the entry.

    Parameters:
    - json_path (str | Path): The path to the JSON file.
    - entry_name (str): The top-level key to look up.
    - default (Any): Value returned when the entry is unavailable.
    """
    path = Path(json_path) if isinstance(json_path, str) else json_path

    if not os.path.exists(path=path):
        return default
    try:
        with open(file=path, mode='rb') as file:
            return orjson.loads(file.read()).get(entry_name, default)
    except (orjson.JSONDecodeError, OSError, AttributeError):
        return default
