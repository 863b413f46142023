"""Toy two-stream part-based classifier.

A three-stage convolutional backbone feeds one head per stage (conv block,
global max pool, representation projection, classifier). During training
the last feature map also drives a part proposer: the proposed crops go
through the very same backbone and heads, the resulting part tokens are
aligned (graph matching, attention, or not at all) and regularize the
global representations. At test time only the global stream runs.

The proposer is a deliberate simplification: sliding windows on the last
feature map are scored by their mean activation energy, filtered by greedy
non-maximum suppression and mapped back to image coordinates.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from PartAlign.align_attention import AttnAligner, CrossAttnAligner, PartTokens
from PartAlign.align_graphmatch import (
    CorrelationBank,
    MatchingMode,
    Permutation,
    bank_update,
    best_permutations,
    correlation,
    reorder_parts,
)
from PartAlign.errors import ConfigurationError, ProposalError, ShapeMismatchError, VariantStateError
from PartAlign.losses import KLDirection, UnifierPhi, cross_entropy, reg_loss, total_loss
from PartAlign.tensor_core import (
    Linear,
    Module,
    Tensor,
    gelu,
    max_over_axis,
    no_grad,
    record,
    register_rule,
    relu,
    reshape,
    sum_over_axis,
    uniform_fan_in,
    zeros_parameter,
)

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
ALIGNMENT_KINDS: tuple[str, ...] = ("none", "graphmatch", "selfattn", "crossattn")


# -- convolution primitives --------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; x [B, C, H, W], weight [O, C, 3, 3]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeMismatchError("conv2d", x.shape, weight.shape, bias.shape)
    batch, channels, height, width = x.shape
    out_channels, _, k, _ = weight.shape
    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * k * k)
    kernel = weight.data.reshape(out_channels, channels * k * k)
    out = cols @ kernel.T + bias.data
    data = out.reshape(batch, height, width, out_channels).transpose(0, 3, 1, 2)
    return record("conv2d", np.ascontiguousarray(data), (x, weight, bias), (cols, weight.data, x.shape))


@register_rule("conv2d")
def _conv2d_rule(ctx, grad):
    cols, weight, x_shape = ctx
    batch, channels, height, width = x_shape
    out_channels, _, k, _ = weight.shape
    pad = k // 2
    grad_rows = grad.transpose(0, 2, 3, 1).reshape(batch * height * width, out_channels)
    grad_weight = (grad_rows.T @ cols).reshape(weight.shape)
    grad_bias = grad_rows.sum(axis=0)
    grad_cols = (grad_rows @ weight.reshape(out_channels, channels * k * k)).reshape(batch, height, width, channels, k, k)
    grad_padded = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad), dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            grad_padded[:, :, i : i + height, j : j + width] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = grad_padded[:, :, pad : pad + height, pad : pad + width]
    return grad_x, grad_weight, grad_bias


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    batch, channels, height, width = x.shape
    if height % factor or width % factor:
        raise ShapeMismatchError("avg_pool2d", x.shape, message=f"avg_pool2d: {x.shape} not divisible by {factor}")
    data = x.data.reshape(batch, channels, height // factor, factor, width // factor, factor).mean(axis=(3, 5))
    return record("avg_pool2d", data, (x,), factor)


@register_rule("avg_pool2d")
def _avg_pool2d_rule(factor, grad):
    spread = np.repeat(np.repeat(grad, factor, axis=2), factor, axis=3)
    return (spread / (factor * factor),)


# -- configuration ---------------------------------------------------------------
@dataclass(frozen=True)
class AlignmentVariant:
    kind: Literal["none", "graphmatch", "selfattn", "crossattn"]
    layers: int = 3

    def __post_init__(self):
        if self.kind not in ALIGNMENT_KINDS:
            raise ConfigurationError(f"Unknown alignment '{self.kind}'. Expected one of {ALIGNMENT_KINDS}")
        if self.layers < 1:
            raise ConfigurationError(f"Attention layers must be at least 1, got {self.layers}")

    @classmethod
    def parse(cls, name: str, layers: int = 3) -> "AlignmentVariant":
        """Accepts ``none``, ``graphmatch``, ``attn`` (with ``layers``), ``attn1``/``attn3`` and ``crossattn``."""
        name = name.lower()
        if name in ("attn", "selfattn"):
            return cls("selfattn", layers)
        if name.startswith("attn") and name[4:].isdigit():
            return cls("selfattn", int(name[4:]))
        if name in ("crossattn", "cross"):
            return cls("crossattn", layers)
        return cls(name, layers)

    @property
    def label(self) -> str:
        if self.kind == "selfattn":
            return f"attn{self.layers}"
        return self.kind


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    image_size: int = 64
    widths: tuple[int, int, int] = (16, 32, 64)
    pool_factors: tuple[int, int, int] = (4, 2, 2)
    head_channels: int = 32
    d_repr: int = 32
    num_classes: int = 8
    num_parts: int = 4
    window: int = 2
    nms_iou: float = 0.25
    activation: Literal["relu", "gelu"] = "relu"
    heads: int = 4
    expansion: int = 4
    matching_mode: MatchingMode = "exact"

    def __post_init__(self):
        total_stride = int(np.prod(self.pool_factors))
        if len(self.widths) != len(self.pool_factors):
            raise ConfigurationError("widths and pool_factors must have one entry per stage")
        if self.image_size % total_stride:
            raise ConfigurationError(f"image_size={self.image_size} must be divisible by {total_stride}")
        if self.num_parts < 1:
            raise ConfigurationError(f"num_parts must be at least 1, got {self.num_parts}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigurationError(f"Unknown activation '{self.activation}'")

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    @classmethod
    def miniature(cls) -> "ModelConfig":
        """One-channel configuration small enough for finite-difference checks."""
        return cls(
            in_channels=1,
            image_size=32,
            widths=(2, 3, 4),
            head_channels=4,
            d_repr=8,
            num_classes=3,
            num_parts=2,
            window=1,
            activation="gelu",
            heads=2,
            expansion=2,
        )


@dataclass(frozen=True)
class LossSettings:
    lambda_reg: float = 1.0
    lambda_part: float = 1.0
    tau: float = 1.0
    kl_direction: KLDirection = "unified_target"


@dataclass(frozen=True)
class PartBox:
    """Square crop in input-image pixels."""

    row: int
    col: int
    side: int
    score: float


@dataclass
class LossBreakdown:
    total: Tensor
    per_stage_ce: list[float]
    part_ce: float
    reg: float
    global_logits: np.ndarray
    permutations: list[Permutation] = field(default_factory=list)


# -- network pieces ----------------------------------------------------------------
class ConvLayer(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        fan_in = in_channels * KERNEL_SIZE * KERNEL_SIZE
        self.weight = uniform_fan_in(rng, (out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE), fan_in)
        self.bias = zeros_parameter((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


def _activate(x: Tensor, activation: str) -> Tensor:
    return relu(x) if activation == "relu" else gelu(x)


class BackboneToy(Module):
    """Three stages of [conv3x3, activation, average pool]; one parameter set for both streams."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        channels = [config.in_channels, *config.widths]
        self.stages = [ConvLayer(channels[i], channels[i + 1], rng) for i in range(config.num_stages)]

    def forward(self, images: Tensor) -> list[Tensor]:
        expected = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeMismatchError("backbone_forward", images.shape, expected)
        maps = []
        x = images
        for stage, factor in zip(self.stages, self.config.pool_factors):
            x = avg_pool2d(_activate(stage(x), self.config.activation), factor)
            maps.append(x)
        return maps


class StageHead(Module):
    def __init__(self, in_channels: int, config: ModelConfig, rng: np.random.Generator):
        self.activation = config.activation
        self.conv = ConvLayer(in_channels, config.head_channels, rng)
        self.projection = Linear(config.head_channels, config.d_repr, rng)
        self.classifier = Linear(config.d_repr, config.num_classes, rng)

    def forward(self, feature_map: Tensor) -> tuple[Tensor, Tensor]:
        x = _activate(self.conv(feature_map), self.activation)
        batch, channels, height, width = x.shape
        pooled = max_over_axis(reshape(x, (batch, channels, height * width)), axis=-1)
        representation = self.projection(pooled)
        return representation, self.classifier(representation)


# -- part proposal ---------------------------------------------------------------
def _cell_iou(a: tuple[int, int], b: tuple[int, int], window: int) -> float:
    rows = max(0, window - abs(a[0] - b[0]))
    cols = max(0, window - abs(a[1] - b[1]))
    intersection = rows * cols
    return intersection / (2 * window * window - intersection)


def _greedy_nms(order: np.ndarray, positions: list[tuple[int, int]], window: int, threshold: float, limit: int) -> list[int]:
    kept: list[int] = []
    for index in order:
        if all(_cell_iou(positions[index], positions[other], window) < threshold for other in kept):
            kept.append(int(index))
            if len(kept) == limit:
                break
    return kept


def propose_parts(f3: np.ndarray, num_parts: int, window: int, nms_iou: float, image_size: int) -> list[PartBox]:
    """Top ``num_parts`` windows of the last feature map ([C, h, w]) by mean channel-L2 energy.

    Ties keep row-major scan order. If NMS leaves fewer than ``num_parts``
    windows the IoU threshold is relaxed once to ``(1 + nms_iou) / 2``.
    """
    if num_parts < 1:
        raise ValueError(f"num_parts must be at least 1, got {num_parts}")
    f3 = np.asarray(f3)
    _, height, width = f3.shape
    if window < 1 or window > min(height, width):
        raise ProposalError(f"Window {window} does not fit a {height}x{width} feature map")
    energy = np.sqrt(np.sum(f3.astype(np.float64) ** 2, axis=0))
    scores = sliding_window_view(energy, (window, window)).mean(axis=(-1, -2))
    positions = [(r, c) for r in range(scores.shape[0]) for c in range(scores.shape[1])]
    flat_scores = scores.reshape(-1)
    order = np.argsort(-flat_scores, kind="stable")

    kept = _greedy_nms(order, positions, window, nms_iou, num_parts)
    if len(kept) < num_parts:
        relaxed = (1.0 + nms_iou) / 2.0
        logger.debug(f"NMS kept {len(kept)}/{num_parts} windows at IoU {nms_iou}; relaxing to {relaxed}")
        kept = _greedy_nms(order, positions, window, relaxed, num_parts)
        if len(kept) < num_parts:
            raise ProposalError(f"Only {len(kept)} windows survive NMS, {num_parts} requested")

    stride = image_size // height
    return [
        PartBox(row=positions[i][0] * stride, col=positions[i][1] * stride, side=window * stride, score=float(flat_scores[i]))
        for i in kept
    ]


def crop_and_resize(image: np.ndarray, box: PartBox, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a square crop of ``image`` ([C, H, W]) to ``size`` x ``size``."""
    _, height, width = image.shape
    if box.side < 1 or box.row < 0 or box.col < 0 or box.row + box.side > height or box.col + box.side > width:
        raise ProposalError(f"Degenerate or out-of-bounds part box {box} for a {height}x{width} image")
    crop = image[:, box.row : box.row + box.side, box.col : box.col + box.side]
    index = (np.arange(size) * box.side) // size
    return crop[:, index][:, :, index]


# -- full model ------------------------------------------------------------------
class TwoStreamNet(Module):
    def __init__(self, config: ModelConfig, variant: AlignmentVariant, rng: np.random.Generator):
        self.config = config
        self.variant = variant
        self.backbone = BackboneToy(config, rng)
        self.heads = [StageHead(width, config, rng) for width in config.widths]
        self.phi: UnifierPhi | None = None
        self.aligner: AttnAligner | CrossAttnAligner | None = None
        d = config.d_repr
        if variant.kind in ("none", "graphmatch"):
            self.phi = UnifierPhi(config.num_parts, d, d, config.expansion * d, rng)
        elif variant.kind == "selfattn":
            self.aligner = AttnAligner(d, d, rng, num_layers=variant.layers, heads=config.heads, expansion=config.expansion)
        else:
            self.aligner = CrossAttnAligner(d, d, d, rng, num_layers=variant.layers, heads=config.heads, expansion=config.expansion)

    @property
    def dtype(self):
        return self.backbone.stages[0].weight.dtype

    def alignment_parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters() if name.startswith(("phi.", "aligner."))]

    def as_batch(self, images) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        return images[None] if images.ndim == 3 else images

    def global_pass(self, images: np.ndarray) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
        maps = self.backbone(Tensor(images))
        representations, logits = [], []
        for head, feature_map in zip(self.heads, maps):
            representation, stage_logits = head(feature_map)
            representations.append(representation)
            logits.append(stage_logits)
        return maps, representations, logits

    def propose(self, f3_batch: np.ndarray) -> list[list[PartBox]]:
        c = self.config
        return [propose_parts(f3, c.num_parts, c.window, c.nms_iou, c.image_size) for f3 in f3_batch]

    def encode_parts(self, images: np.ndarray, boxes: Sequence[Sequence[PartBox]]) -> tuple[list[PartTokens], Tensor]:
        """Run every crop through the shared backbone and heads.

        Returns one PartTokens [B, N, d_r] per stage and the part logits
        [B, N, C], summed over stages.
        """
        c = self.config
        batch = len(boxes)
        crops = np.stack([crop_and_resize(image, box, c.image_size) for image, sample_boxes in zip(images, boxes) for box in sample_boxes])
        _, representations, logits = self.global_pass(crops)
        tokens = [
            PartTokens(stage=s + 1, tokens=reshape(representation, (batch, c.num_parts, c.d_repr)))
            for s, representation in enumerate(representations)
        ]
        summed = logits[0]
        for stage_logits in logits[1:]:
            summed = summed + stage_logits
        return tokens, reshape(summed, (batch, c.num_parts, c.num_classes))

    def _check_variant(self, variant: AlignmentVariant, bank: CorrelationBank | None) -> None:
        if (variant.kind == "graphmatch") != (bank is not None):
            raise VariantStateError(f"A correlation bank is required for graphmatch and only for graphmatch (variant={variant.label})")
        if variant.kind in ("none", "graphmatch") and self.phi is None:
            raise VariantStateError(f"Variant {variant.label} needs the unifier MLP, which this model does not hold")
        if variant.kind == "selfattn" and not isinstance(self.aligner, AttnAligner):
            raise VariantStateError("Variant selfattn needs a self-attention aligner")
        if variant.kind == "crossattn" and not isinstance(self.aligner, CrossAttnAligner):
            raise VariantStateError("Variant crossattn needs a cross-attention aligner")
        if bank is not None and bank.num_parts != self.config.num_parts:
            raise VariantStateError(f"Bank holds {bank.num_parts} parts, model proposes {self.config.num_parts}")

    def unify(
        self,
        variant: AlignmentVariant,
        global_representations: list[Tensor],
        part_tokens: list[PartTokens],
        bank: CorrelationBank | None,
        update_bank: bool,
    ) -> tuple[list[Tensor], list[Permutation]]:
        if variant.kind == "selfattn":
            return [self.aligner(tokens) for tokens in part_tokens], []
        if variant.kind == "crossattn":
            return [self.aligner(g, tokens) for g, tokens in zip(global_representations, part_tokens)], []
        if variant.kind == "none":
            return [self.phi(tokens) for tokens in part_tokens], []
        permutations = best_permutations(correlation(part_tokens[-1]), bank, self.config.matching_mode)
        aligned = [reorder_parts(tokens, permutations) for tokens in part_tokens]
        if update_bank:
            bank_update(bank, correlation(aligned[-1]).mean(axis=0))
        return [self.phi(tokens) for tokens in aligned], permutations

    def forward_train(
        self,
        images,
        labels,
        variant: AlignmentVariant | None = None,
        bank: CorrelationBank | None = None,
        settings: LossSettings = LossSettings(),
        update_bank: bool = True,
    ) -> LossBreakdown:
        variant = variant or self.variant
        self._check_variant(variant, bank)
        images = self.as_batch(images)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.shape != (images.shape[0],):
            raise ShapeMismatchError("forward_train", images.shape, labels.shape)

        maps, global_representations, global_logits = self.global_pass(images)
        boxes = self.propose(maps[-1].data)
        part_tokens, part_logits = self.encode_parts(images, boxes)
        unified, permutations = self.unify(variant, global_representations, part_tokens, bank, update_bank)
        reg = reg_loss(global_representations, unified, settings.tau, settings.kl_direction)
        total = total_loss(global_logits, part_logits, reg, labels, settings.lambda_reg, settings.lambda_part)

        with no_grad():
            per_stage_ce = [float(cross_entropy(Tensor(logits.data), labels).data.mean()) for logits in global_logits]
            part_ce = float(sum_over_axis(cross_entropy(Tensor(part_logits.data), labels[:, None]), axis=-1).data.mean())
        return LossBreakdown(
            total=total,
            per_stage_ce=per_stage_ce,
            part_ce=part_ce,
            reg=reg.data.item(),
            global_logits=np.sum([logits.data for logits in global_logits], axis=0),
            permutations=permutations,
        )

    def forward_test(self, images) -> np.ndarray:
        """Summed stage logits from the global stream only; returns [B, C] (or [C] for one image)."""
        single = np.asarray(images.data if isinstance(images, Tensor) else images).ndim == 3
        with no_grad():
            _, _, logits = self.global_pass(self.as_batch(images))
        fused = np.sum([stage_logits.data for stage_logits in logits], axis=0)
        return fused[0] if single else fused

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.forward_test(images), axis=-1)


def backbone_forward(model: TwoStreamNet, image) -> list[Tensor]:
    return model.backbone(Tensor(model.as_batch(image)))
