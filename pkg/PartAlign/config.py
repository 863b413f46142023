"""Run configuration: dataclass defaults, JSON files and command-line overrides."""
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from PartAlign.errors import ConfigurationError
from PartAlign.json_functions import read_json
from PartAlign.losses import KL_DIRECTIONS
from PartAlign.model import AlignmentVariant, ModelConfig
from PartAlign.synthdata import SynthSpec

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
MATCHING_MODES = ("exact", "greedy")
# ModelConfig fields a run may override; the rest follow the dataset or the run itself.
MODEL_OVERRIDES = ("widths", "pool_factors", "head_channels", "d_repr", "window", "nms_iou", "activation", "heads", "expansion")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    alignment: str = "attn3"
    attn_layers: int = 3
    jitter: bool = False
    jitter_strength: float = 0.4
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lambda_reg: float = 1.0
    lambda_part: float = 1.0
    tau: float = 1.0
    kl_direction: str = "unified_target"
    ema_rate: float = 0.1
    num_parts: int = 4
    matching_mode: str = "exact"
    precision: str = "float32"
    food_mode: bool = False
    synth: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        AlignmentVariant.parse(self.alignment, self.attn_layers)
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigurationError(f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction}")
        if self.matching_mode not in MATCHING_MODES:
            raise ConfigurationError(f"matching_mode must be one of {MATCHING_MODES}, got {self.matching_mode}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"Need lr > 0 and momentum in [0, 1), got lr={self.lr}, momentum={self.momentum}")
        if self.lambda_reg < 0 or self.lambda_part < 0 or self.tau <= 0:
            raise ConfigurationError("lambda_reg and lambda_part must be non-negative and tau positive")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ConfigurationError(f"ema_rate must lie in [0, 1], got {self.ema_rate}")
        if not 0.0 <= self.jitter_strength <= 1.0:
            raise ConfigurationError(f"jitter_strength must lie in [0, 1], got {self.jitter_strength}")
        if self.num_parts < 1:
            raise ConfigurationError(f"num_parts must be at least 1, got {self.num_parts}")
        unknown = sorted(set(self.model) - set(MODEL_OVERRIDES))
        if unknown:
            raise ConfigurationError(f"Unknown model override(s): {unknown}")
        # bad synth or model overrides raise here
        self.model_config(self.synth_spec())

    @property
    def variant(self) -> AlignmentVariant:
        return AlignmentVariant.parse(self.alignment, self.attn_layers)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def effective_jitter(self) -> float:
        return self.jitter_strength if self.jitter else 0.0

    def synth_spec(self) -> SynthSpec:
        try:
            return SynthSpec.from_dict({**self.synth, "food_mode": self.food_mode})
        except TypeError as error:
            raise ConfigurationError(f"Invalid synth override: {error}") from error

    def model_config(self, spec: SynthSpec | None = None) -> ModelConfig:
        spec = spec or self.synth_spec()
        overrides = {key: tuple(value) if isinstance(value, list) else value for key, value in self.model.items()}
        return ModelConfig(
            in_channels=3,
            image_size=spec.image_size,
            num_classes=spec.num_classes,
            num_parts=self.num_parts,
            matching_mode=self.matching_mode,
            **overrides,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RunConfig":
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"Unknown configuration key(s): {unknown}")
        try:
            return cls(**payload)
        except TypeError as error:
            raise ConfigurationError(str(error)) from error

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional JSON file and explicit overrides, in that order of precedence.

    Raises:
        ConfigurationError: If the file holds something other than an object,
            an unknown key, or an invalid value.
        OSError: If the file cannot be read.
    """
    payload: dict[str, Any] = {}
    if path is not None:
        loaded = read_json(path)
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"Configuration file {path} must contain a JSON object")
        payload.update(loaded)
        logger.debug(f"Loaded run configuration from {path}")
    payload.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return RunConfig.from_dict(payload)


def miniature_run_config(**overrides: Any) -> RunConfig:
    """Small dataset and model for fast end-to-end runs."""
    base = RunConfig(
        epochs=2,
        batch_size=8,
        synth={"num_classes": 3, "parts_per_object": 2, "image_size": 32, "glyph_size": 8, "jitter_radius": 2, "train_count": 24, "test_count": 12},
        num_parts=2,
        model={"widths": [4, 6, 8], "head_channels": 6, "d_repr": 8, "window": 1, "heads": 2, "expansion": 2},
    )
    return replace(base, **overrides) if overrides else base
