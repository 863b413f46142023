"""Order-free part alignment with transformer blocks.

Part tokens go through a stack of pre-norm transformer blocks without
positional encodings, are averaged over the token axis and mapped through
an inverted-bottleneck MLP. Because every block is permutation-equivariant
and the average is symmetric, the result does not depend on the order in
which parts were proposed, and no reference state has to be kept between
calls.

The cross-attention variant uses the global representation of the same
stage as the single query row and the parts as keys/values.
"""
import math
from dataclasses import dataclass

import numpy as np

from PartAlign.errors import ConfigurationError, ShapeMismatchError
from PartAlign.tensor_core import (
    Linear,
    Module,
    Tensor,
    gelu,
    layer_norm,
    matmul,
    mean_over_axis,
    ones_parameter,
    reshape,
    softmax,
    transpose,
    zeros_parameter,
)


@dataclass
class PartTokens:
    """Per-part feature rows of one backbone stage; row order carries no meaning."""

    stage: int
    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim < 2:
            raise ShapeMismatchError("PartTokens", self.tokens.shape, message=f"PartTokens need [..., N, d], got {self.tokens.shape}")

    @property
    def num_parts(self) -> int:
        return self.tokens.shape[-2]

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]


class AttentionParams(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if heads < 1 or d_model % heads != 0:
            raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.output = Linear(d_model, d_model, rng, zero_init=True)


class TransformerBlock(Module):
    def __init__(self, d_model: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1_gamma = ones_parameter((d_model,))
        self.norm1_beta = zeros_parameter((d_model,))
        self.attention = AttentionParams(d_model, heads, rng)
        self.norm2_gamma = ones_parameter((d_model,))
        self.norm2_beta = zeros_parameter((d_model,))
        self.mlp_in = Linear(d_model, mlp_ratio * d_model, rng)
        self.mlp_out = Linear(mlp_ratio * d_model, d_model, rng, zero_init=True)


class CrossAttentionBlock(TransformerBlock):
    def __init__(self, d_model: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__(d_model, heads, mlp_ratio, rng)
        self.norm_kv_gamma = ones_parameter((d_model,))
        self.norm_kv_beta = zeros_parameter((d_model,))


class InvertedBottleneckMLP(Module):
    def __init__(self, d_model: int, expansion: int, d_out: int, rng: np.random.Generator):
        if expansion * d_model <= d_model:
            raise ConfigurationError(f"Inverted bottleneck needs a hidden width above {d_model}, got expansion={expansion}")
        self.fc1 = Linear(d_model, expansion * d_model, rng)
        self.fc2 = Linear(expansion * d_model, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class AttnAligner(Module):
    """Self-attention aligner: ``num_layers`` blocks, token average, inverted-bottleneck MLP."""

    def __init__(self, d_model: int, d_out: int, rng: np.random.Generator, num_layers: int = 3, heads: int = 4, expansion: int = 4):
        if num_layers < 1:
            raise ConfigurationError(f"num_layers must be at least 1, got {num_layers}")
        self.num_layers = num_layers
        self.heads = heads
        self.d_model = d_model
        self.blocks = [TransformerBlock(d_model, heads, expansion, rng) for _ in range(num_layers)]
        self.pool_mlp = InvertedBottleneckMLP(d_model, expansion, d_out, rng)

    def forward(self, parts: PartTokens) -> Tensor:
        return align_self_attn(parts, self)


class CrossAttnAligner(Module):
    """Cross-attention aligner: the stage's global vector queries the part tokens."""

    def __init__(self, d_global: int, d_model: int, d_out: int, rng: np.random.Generator, num_layers: int = 3, heads: int = 4, expansion: int = 4):
        if num_layers < 1:
            raise ConfigurationError(f"num_layers must be at least 1, got {num_layers}")
        self.num_layers = num_layers
        self.heads = heads
        self.d_model = d_model
        self.query_proj = Linear(d_global, d_model, rng)
        self.blocks = [CrossAttentionBlock(d_model, heads, expansion, rng) for _ in range(num_layers)]
        self.pool_mlp = InvertedBottleneckMLP(d_model, expansion, d_out, rng)

    def forward(self, global_repr: Tensor, parts: PartTokens) -> Tensor:
        return align_cross_attn(global_repr, parts, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *leading, rows, width = x.shape
    x = reshape(x, (*leading, rows, heads, width // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = transpose(x, axes)
    *leading, rows, heads, head_width = x.shape
    return reshape(x, (*leading, rows, heads * head_width))


def multi_head_attention(queries: Tensor, keys_values: Tensor, params: AttentionParams) -> Tensor:
    """Scaled dot-product attention of ``queries`` [..., M, d] over ``keys_values`` [..., N, d]."""
    if queries.shape[-1] != params.d_model or keys_values.shape[-1] != params.d_model:
        raise ShapeMismatchError("multi_head_attention", queries.shape, keys_values.shape)
    q = _split_heads(params.query(queries), params.heads)
    k = _split_heads(params.key(keys_values), params.heads)
    v = _split_heads(params.value(keys_values), params.heads)
    scores = matmul(q, transpose(k)) / math.sqrt(params.d_model // params.heads)
    weights = softmax(scores, axis=-1)
    return params.output(_merge_heads(matmul(weights, v)))


def mhsa(tokens: Tensor, params: AttentionParams) -> Tensor:
    return multi_head_attention(tokens, tokens, params)


def _block_mlp(x: Tensor, block: TransformerBlock) -> Tensor:
    hidden = layer_norm(x, block.norm2_gamma, block.norm2_beta)
    return x + block.mlp_out(gelu(block.mlp_in(hidden)))


def transformer_block(tokens: Tensor, block: TransformerBlock) -> Tensor:
    x = tokens + mhsa(layer_norm(tokens, block.norm1_gamma, block.norm1_beta), block.attention)
    return _block_mlp(x, block)


def cross_attention_block(query: Tensor, parts: Tensor, block: CrossAttentionBlock) -> Tensor:
    normalized_parts = layer_norm(parts, block.norm_kv_gamma, block.norm_kv_beta)
    x = query + multi_head_attention(layer_norm(query, block.norm1_gamma, block.norm1_beta), normalized_parts, block.attention)
    return _block_mlp(x, block)


def align_self_attn(parts: PartTokens, params: AttnAligner) -> Tensor:
    if parts.width != params.d_model:
        raise ShapeMismatchError("align_self_attn", parts.tokens.shape, (params.d_model,))
    x = parts.tokens
    for block in params.blocks:
        x = transformer_block(x, block)
    return params.pool_mlp(mean_over_axis(x, axis=-2))


def align_cross_attn(global_repr: Tensor, parts: PartTokens, params: CrossAttnAligner) -> Tensor:
    if (
        global_repr.shape[-1] != params.query_proj.in_features
        or parts.width != params.d_model
        or global_repr.shape[:-1] != parts.tokens.shape[:-2]
    ):
        raise ShapeMismatchError("align_cross_attn", global_repr.shape, parts.tokens.shape)
    query = params.query_proj(global_repr)
    query = reshape(query, (*query.shape[:-1], 1, params.d_model))
    for block in params.blocks:
        query = cross_attention_block(query, parts.tokens, block)
    return params.pool_mlp(mean_over_axis(query, axis=-2))
