"""Deterministic synthetic fine-grained datasets.

Each class is a fixed set of K part types (a filled shape in a palette
colour). A sample draws the glyphs of its class into a grid of slots; with
``pose_permute`` the glyph-to-slot assignment is a fresh random permutation
per sample, so parts reach the model in no particular order. Sample ``i`` of
a split draws all randomness from ``default_rng([seed, split, i])`` and is
therefore independent of generation order.

The texture-only variant keeps the glyphs identical for every class and
puts the class signal into a tinted background texture; the glyph boxes
themselves are painted over a neutral backdrop and carry no class signal.
"""
import colorsys
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from PartAlign.errors import ConfigurationError, ShapeMismatchError
from PartAlign.json_functions import read_json, write_json

logger = logging.getLogger(__name__)

SHAPES: tuple[str, ...] = ("circle", "square", "triangle", "cross")
DEFAULT_PALETTE: tuple[tuple[float, float, float], ...] = (
    (0.9, 0.1, 0.1),
    (0.1, 0.8, 0.1),
    (0.1, 0.2, 0.9),
    (0.95, 0.85, 0.1),
    (0.85, 0.1, 0.85),
    (0.1, 0.85, 0.85),
)
SPLITS = {"train": 0, "test": 1}
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    parts_per_object: int = 4
    image_size: int = 64
    glyph_size: int = 20
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    pose_permute: bool = True
    jitter_radius: int = 4
    train_count: int = 2000
    test_count: int = 500
    seed: int = 0
    noise_sigma: float = 0.05
    food_mode: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.parts_per_object < 2:
            raise ConfigurationError(f"parts_per_object must be at least 2, got {self.parts_per_object}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigurationError("train_count and test_count must be at least 1")
        if self.glyph_size + 2 * self.jitter_radius > self.slot_size:
            raise ConfigurationError(
                f"Glyphs of size {self.glyph_size} with jitter {self.jitter_radius} do not fit "
                f"{self.slot_size}px slots of a {self.image_size}px image"
            )
        if len(SHAPES) * len(self.palette) < self.parts_per_object:
            raise ConfigurationError("Palette too small for the requested number of part types")

    @property
    def grid(self) -> int:
        return int(np.ceil(np.sqrt(self.parts_per_object)))

    @property
    def slot_size(self) -> int:
        return self.image_size // self.grid

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["palette"] = [list(color) for color in self.palette]
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        payload = dict(payload)
        if "palette" in payload:
            payload["palette"] = tuple(tuple(float(v) for v in color) for color in payload["palette"])
        return cls(**payload)


@dataclass(frozen=True)
class SynthSample:
    image: np.ndarray
    label: int
    part_boxes: np.ndarray


@dataclass
class SynthDataset:
    spec: SynthSpec
    split: str
    images: np.ndarray
    labels: np.ndarray
    part_boxes: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> SynthSample:
        return SynthSample(image=self.images[index], label=int(self.labels[index]), part_boxes=self.part_boxes[index])


@lru_cache(maxsize=None)
def glyph_mask(shape: str, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    center = (size - 1) / 2.0
    if shape == "circle":
        return (rows - center) ** 2 + (cols - center) ** 2 <= (size / 2.0) ** 2
    if shape == "square":
        return (np.abs(rows - center) <= 0.4 * size) & (np.abs(cols - center) <= 0.4 * size)
    if shape == "triangle":
        return np.abs(cols - center) <= (rows / max(size - 1, 1)) * (size / 2.0)
    if shape == "cross":
        return (np.abs(rows - center) <= size / 6.0) | (np.abs(cols - center) <= size / 6.0)
    raise ValueError(f"Unknown glyph shape: {shape}")


def class_part_types(spec: SynthSpec) -> np.ndarray:
    """[C, K, 2] array of (shape index, colour index) per class and part.

    Classes are distinct as multisets, so they stay distinguishable when
    part order is shuffled. In texture mode every class shares one set.
    """
    rng = np.random.default_rng([spec.seed, 7919])
    num_types = len(SHAPES) * len(spec.palette)
    if spec.food_mode:
        shared = rng.choice(num_types, size=spec.parts_per_object, replace=False)
        chosen = [shared] * spec.num_classes
    else:
        seen: set[tuple[int, ...]] = set()
        chosen = []
        while len(chosen) < spec.num_classes:
            types = rng.choice(num_types, size=spec.parts_per_object, replace=False)
            key = tuple(sorted(int(t) for t in types))
            if key in seen:
                continue
            seen.add(key)
            chosen.append(types)
    types = np.asarray(chosen, dtype=np.int64)
    return np.stack([types // len(spec.palette), types % len(spec.palette)], axis=-1)


def _class_tint(label: int, num_classes: int) -> np.ndarray:
    return np.asarray(colorsys.hsv_to_rgb(label / num_classes, 0.7, 0.9), dtype=np.float32)


def _texture_background(spec: SynthSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    cells = spec.image_size // 4
    coarse = rng.random((cells, cells)).astype(np.float32)
    field_ = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)
    return _class_tint(label, spec.num_classes)[:, None, None] * (0.6 + 0.4 * field_)[None]


def render_sample(spec: SynthSpec, part_types: np.ndarray, split: str, index: int) -> tuple[np.ndarray, int, np.ndarray]:
    """Image [3, H, W] in [0, 1], label and [K, 3] ground-truth boxes (row, col, side)."""
    rng = np.random.default_rng([spec.seed, SPLITS[split], index])
    label = index % spec.num_classes
    size, glyph, k = spec.image_size, spec.glyph_size, spec.parts_per_object
    noise = rng.normal(0.0, spec.noise_sigma, size=(3, size, size)).astype(np.float32)
    if spec.food_mode:
        image = _texture_background(spec, label, rng) + noise
    else:
        image = np.full((3, size, size), 0.5, dtype=np.float32) + noise

    slots = rng.permutation(spec.grid * spec.grid)[:k] if spec.pose_permute else np.arange(k)
    boxes = np.zeros((k, 3), dtype=np.int64)
    margin = (spec.slot_size - glyph) // 2
    for part, slot in enumerate(slots):
        slot_row, slot_col = divmod(int(slot), spec.grid)
        offset_row, offset_col = rng.integers(-spec.jitter_radius, spec.jitter_radius + 1, size=2)
        row = slot_row * spec.slot_size + margin + int(offset_row)
        col = slot_col * spec.slot_size + margin + int(offset_col)
        shape_index, color_index = part_types[label, part]
        region = image[:, row : row + glyph, col : col + glyph]
        if spec.food_mode:
            region[...] = 0.5 + rng.normal(0.0, spec.noise_sigma, size=region.shape).astype(np.float32)
        mask = glyph_mask(SHAPES[shape_index], glyph)
        color = np.asarray(spec.palette[color_index], dtype=np.float32)
        region[:, mask] = color[:, None]
        boxes[part] = (row, col, glyph)
    return np.clip(image, 0.0, 1.0), label, boxes


def _generate_split(spec: SynthSpec, split: str, count: int) -> SynthDataset:
    part_types = class_part_types(spec)
    images = np.empty((count, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    boxes = np.empty((count, spec.parts_per_object, 3), dtype=np.int64)
    for index in range(count):
        images[index], labels[index], boxes[index] = render_sample(spec, part_types, split, index)
    return SynthDataset(spec=spec, split=split, images=images, labels=labels, part_boxes=boxes)


def generate(spec: SynthSpec) -> tuple[SynthDataset, SynthDataset]:
    """Train and test splits, fully determined by ``spec`` (including its seed)."""
    logger.info(f"Generating synthetic data: {spec.num_classes} classes, {spec.train_count}/{spec.test_count} samples, food_mode={spec.food_mode}")
    return _generate_split(spec, "train", spec.train_count), _generate_split(spec, "test", spec.test_count)


def food_mode(spec: SynthSpec) -> tuple[SynthDataset, SynthDataset]:
    """Texture-only variant of ``generate``: class-tinted background, class-independent glyphs."""
    return generate(replace(spec, food_mode=True))


def color_jitter(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Random brightness, contrast and saturation, in that order, each factor from [1 - s, 1 + s]."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"Jitter strength must lie in [0, 1], got {strength}")
    if strength == 0.0:
        return image.copy()
    brightness, contrast, saturation = rng.uniform(1.0 - strength, 1.0 + strength, size=3).astype(np.float32)
    out = np.clip(image * brightness, 0.0, 1.0)
    gray = np.tensordot(LUMA, out, axes=(0, 0))
    out = np.clip(gray.mean() + (out - gray.mean()) * contrast, 0.0, 1.0)
    gray = np.tensordot(LUMA, out, axes=(0, 0))[None]
    out = np.clip(gray + (out - gray) * saturation, 0.0, 1.0)
    return out.astype(image.dtype)


def iterate_batches(
    dataset: SynthDataset,
    batch_size: int,
    seed: int,
    epoch: int,
    shuffle: bool = True,
    jitter_strength: float = 0.0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in an order fixed by (seed, epoch); jitter draws from (seed, epoch, sample index)."""
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        index = order[start : start + batch_size]
        images = dataset.images[index]
        if jitter_strength > 0.0:
            images = np.stack([
                color_jitter(image, jitter_strength, np.random.default_rng([seed, epoch, int(i)]))
                for image, i in zip(images, index)
            ])
        yield images, dataset.labels[index]


def part_crops(dataset: SynthDataset) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth part crops [M * K, 3, g, g] with the label of their image (diagnostics only)."""
    crops, labels = [], []
    for sample in (dataset[i] for i in range(len(dataset))):
        for row, col, side in sample.part_boxes:
            crops.append(sample.image[:, row : row + side, col : col + side])
            labels.append(sample.label)
    return np.stack(crops), np.asarray(labels, dtype=np.int64)


def export_dataset(dataset: SynthDataset, out_dir: str | Path) -> Path:
    """Write ``<split>.json`` (manifest, labels) and ``<split>.f32`` (little-endian float32 images)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_name = f"{dataset.split}.f32"
    with open(file=out_dir / blob_name, mode="wb") as file:
        file.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "split": dataset.split,
        "spec": dataset.spec.to_dict(),
        "image_shape": list(dataset.images.shape[1:]),
        "blob": blob_name,
        "samples": [
            {"index": i, "label": int(dataset.labels[i]), "part_boxes": dataset.part_boxes[i].tolist()}
            for i in range(len(dataset))
        ],
    }
    manifest_path = out_dir / f"{dataset.split}.json"
    write_json(manifest_path, manifest)
    return manifest_path


def load_dataset(manifest_path: str | Path) -> SynthDataset:
    manifest_path = Path(manifest_path)
    manifest = read_json(manifest_path)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"Unsupported dataset format version in {manifest_path}: {manifest.get('format_version')}")
    shape = tuple(manifest["image_shape"])
    samples = manifest["samples"]
    raw = np.fromfile(manifest_path.parent / manifest["blob"], dtype="<f4")
    if raw.size != len(samples) * int(np.prod(shape)):
        raise ShapeMismatchError("load_dataset", (raw.size,), (len(samples), *shape))
    return SynthDataset(
        spec=SynthSpec.from_dict(manifest["spec"]),
        split=manifest["split"],
        images=raw.reshape((len(samples), *shape)).astype(np.float32),
        labels=np.asarray([sample["label"] for sample in samples], dtype=np.int64),
        part_boxes=np.asarray([sample["part_boxes"] for sample in samples], dtype=np.int64),
    )
