"""Classification losses and the global/local KL feature regularizer.

Representations become distributions through a temperature softmax over
the feature axis. The regularizer sums one KL term per backbone stage
between the global representation and the unified representation of the
parts (from the unifier MLP or from an attention aligner).
"""
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from PartAlign.align_attention import PartTokens
from PartAlign.errors import NonFiniteError, ShapeMismatchError
from PartAlign.tensor_core import (
    Linear,
    Module,
    Tensor,
    exp,
    gelu,
    log_softmax,
    mean_over_axis,
    reshape,
    sum_over_axis,
)

KLDirection = Literal["unified_target", "global_target"]
KL_DIRECTIONS: tuple[str, ...] = ("unified_target", "global_target")


@dataclass
class GlobalRepr:
    """Per-stage global image representations, all of one width."""

    stages: list[Tensor]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("GlobalRepr needs at least one stage")
        widths = {stage.shape[-1] for stage in self.stages}
        if len(widths) != 1:
            raise ShapeMismatchError("GlobalRepr", *(stage.shape for stage in self.stages))

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)


class UnifierPhi(Module):
    """Two-layer MLP from the concatenated N part vectors to one vector of width d_r."""

    def __init__(self, num_parts: int, d_part: int, d_r: int, hidden: int, rng: np.random.Generator):
        self.num_parts = num_parts
        self.d_part = d_part
        self.fc1 = Linear(num_parts * d_part, hidden, rng)
        self.fc2 = Linear(hidden, d_r, rng)

    def forward(self, parts: PartTokens) -> Tensor:
        if parts.num_parts != self.num_parts or parts.width != self.d_part:
            raise ShapeMismatchError("UnifierPhi", parts.tokens.shape, (self.num_parts, self.d_part))
        flat = reshape(parts.tokens, (*parts.tokens.shape[:-2], self.num_parts * self.d_part))
        return self.fc2(gelu(self.fc1(flat)))


def _require_finite(tensor: Tensor, where: str) -> None:
    if not np.all(np.isfinite(tensor.data)):
        raise NonFiniteError(where)


def kl_div(p_logits: Tensor, q_logits: Tensor, tau: float = 1.0) -> Tensor:
    """KL(softmax(p/tau) || softmax(q/tau)) over the last axis, computed from log-probabilities."""
    if tau <= 0:
        raise ValueError(f"Temperature must be positive, got {tau}")
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatchError("kl_div", p_logits.shape, q_logits.shape)
    _require_finite(p_logits, "kl_div target")
    _require_finite(q_logits, "kl_div approximation")
    log_p = log_softmax(p_logits / tau, axis=-1)
    log_q = log_softmax(q_logits / tau, axis=-1)
    return sum_over_axis(exp(log_p) * (log_p - log_q), axis=-1)


def reg_loss(
    global_repr: GlobalRepr | Sequence[Tensor],
    unified_per_stage: Sequence[Tensor],
    tau: float = 1.0,
    kl_direction: KLDirection = "unified_target",
) -> Tensor:
    """Sum over stages of the KL term; batched inputs are averaged over the batch."""
    stages = list(global_repr)
    if len(stages) != len(unified_per_stage):
        raise ShapeMismatchError("reg_loss", (len(stages),), (len(unified_per_stage),), message=f"reg_loss expects {len(stages)} unified stages, got {len(unified_per_stage)}")
    if kl_direction not in KL_DIRECTIONS:
        raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}, got {kl_direction}")
    total = None
    for global_stage, unified_stage in zip(stages, unified_per_stage):
        if kl_direction == "unified_target":
            term = kl_div(unified_stage, global_stage, tau)
        else:
            term = kl_div(global_stage, unified_stage, tau)
        term = mean_over_axis(term)
        total = term if total is None else total + term
    return total


def _one_hot(label, shape: tuple[int, ...], dtype) -> np.ndarray:
    classes = shape[-1]
    labels = np.asarray(label, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"Label out of range for {classes} classes: {label}")
    try:
        labels = np.broadcast_to(labels.reshape(labels.shape + (1,) * (len(shape) - 1 - labels.ndim)), shape[:-1])
    except ValueError as error:
        raise ShapeMismatchError("cross_entropy", labels.shape, shape) from error
    return np.eye(classes, dtype=dtype)[labels]


def cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label], one value per leading index."""
    target = _one_hot(label, logits.shape, logits.dtype)
    return -sum_over_axis(log_softmax(logits, axis=-1) * target, axis=-1)


def total_loss(
    stage_global_logits: Sequence[Tensor],
    part_logits: Tensor | Sequence[Tensor],
    reg: Tensor | float,
    label,
    lambda_reg: float = 1.0,
    lambda_part: float = 1.0,
) -> Tensor:
    """sum_s CE(global_s) + lambda_part * sum_n CE(part_n) + lambda_reg * reg, batch-averaged.

    ``part_logits`` is either a sequence of N logits tensors or one tensor
    shaped [..., N, C]; the part sum is taken per sample before averaging.
    """
    if lambda_reg < 0 or lambda_part < 0:
        raise ValueError(f"Loss weights must be non-negative, got lambda_reg={lambda_reg}, lambda_part={lambda_part}")
    loss = None
    for logits in stage_global_logits:
        term = mean_over_axis(cross_entropy(logits, label))
        loss = term if loss is None else loss + term
    if isinstance(part_logits, Tensor):
        part_term = mean_over_axis(sum_over_axis(cross_entropy(part_logits, np.asarray(label)[..., None]), axis=-1))
    else:
        part_term = None
        for logits in part_logits:
            term = mean_over_axis(cross_entropy(logits, label))
            part_term = term if part_term is None else part_term + term
    if part_term is not None:
        loss = loss + part_term * float(lambda_part)
    return loss + reg * float(lambda_reg)
