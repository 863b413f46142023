"""Finite-difference verification of every differentiable component.

Each registered component builds, from a seeded generator, a scalar
function and the 64-bit tensors to differentiate. Non-scalar outputs are
reduced with a fixed random projection so that every output coordinate
contributes to the checked gradient. Module parameters are redrawn at
random first, which keeps zero-initialized projections from hiding
gradients behind exact zeros. The end-to-end models check, per parameter
tensor, the few coordinates with the largest analytic gradient.
"""
import logging
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from PartAlign.align_attention import (
    AttentionParams,
    AttnAligner,
    CrossAttentionBlock,
    CrossAttnAligner,
    PartTokens,
    TransformerBlock,
    align_cross_attn,
    align_self_attn,
    cross_attention_block,
    mhsa,
    transformer_block,
)
from PartAlign.align_graphmatch import CorrelationBank, correlation
from PartAlign.console_output import colorize, status_color
from PartAlign.losses import UnifierPhi, kl_div, reg_loss, total_loss
from PartAlign.model import AlignmentVariant, ModelConfig, TwoStreamNet, avg_pool2d, conv2d
from PartAlign.tensor_core import (
    CHECK_DTYPE,
    Module,
    Tensor,
    concat,
    exp,
    gather_rows,
    gelu,
    grad_check,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max_over_axis,
    mean_over_axis,
    no_grad,
    relu,
    reshape,
    softmax,
    sum_over_axis,
    transpose,
)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_SEEDS: tuple[int, ...] = tuple(range(10))
END_TO_END_COORDS = 6

Case = tuple[Callable[..., Tensor], list[Tensor], int | None]
COMPONENTS: dict[str, Callable[[np.random.Generator], Case]] = {}


def component(name: str):
    def decorator(builder: Callable[[np.random.Generator], Case]):
        COMPONENTS[name] = builder
        return builder

    return decorator


@dataclass(frozen=True)
class ComponentResult:
    name: str
    max_rel_err: float
    passed: bool
    seeds: int
    coordinates_checked: int


class _Projection:
    """Fixed random weights matching the output shape, drawn on first use."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: Tensor | None = None

    def __call__(self, out: Tensor) -> Tensor:
        if self.weights is None:
            self.weights = Tensor(self.rng.normal(size=out.shape), dtype=CHECK_DTYPE)
        return sum_over_axis(out * self.weights)


def _tensor(rng: np.random.Generator, *shape: int, away_from_zero: bool = False) -> Tensor:
    values = rng.normal(size=shape)
    if away_from_zero:
        values = np.sign(values) * (0.1 + np.abs(values))
    return Tensor(values, dtype=CHECK_DTYPE)


def _randomized(module: Module, rng: np.random.Generator, scale: float = 0.5) -> Module:
    module.astype(CHECK_DTYPE)
    for parameter in module.parameters():
        parameter.data = rng.normal(scale=scale, size=parameter.shape).astype(CHECK_DTYPE)
    return module


def _unary(op: Callable[[Tensor], Tensor], *shape: int, away_from_zero: bool = False) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        project = _Projection(rng)
        return (lambda x: project(op(x))), [_tensor(rng, *shape, away_from_zero=away_from_zero)], None

    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor], left: tuple[int, ...], right: tuple[int, ...]) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        project = _Projection(rng)
        return (lambda a, b: project(op(a, b))), [_tensor(rng, *left), _tensor(rng, *right)], None

    return build


# -- primitives ------------------------------------------------------------------
component("add")(_binary(lambda a, b: a + b, (3, 4), (4,)))
component("sub")(_binary(lambda a, b: a - b, (2, 3, 4), (3, 1)))
component("mul")(_binary(lambda a, b: a * b, (3, 4), (1, 4)))
component("neg")(_unary(lambda x: -x, 3, 4))
component("matmul")(_binary(matmul, (2, 3, 4), (4, 5)))
component("relu")(_unary(relu, 4, 5, away_from_zero=True))
component("gelu")(_unary(gelu, 4, 5))
component("exp")(_unary(exp, 4, 5))
component("log")(_unary(lambda x: log(x * x + 0.5), 4, 5))
component("softmax")(_unary(lambda x: softmax(x, axis=-1), 3, 5))
component("log_softmax")(_unary(lambda x: log_softmax(x, axis=-1), 3, 5))
component("transpose")(_unary(lambda x: transpose(x, (2, 0, 1)), 2, 3, 4))
component("reshape")(_unary(lambda x: reshape(x, (4, 6)), 2, 3, 4))
component("sum")(_unary(lambda x: sum_over_axis(x, axis=1), 3, 4, 2))
component("mean")(_unary(lambda x: mean_over_axis(x, axis=(0, 2)), 3, 4, 2))
component("max")(_unary(lambda x: max_over_axis(x, axis=-1), 3, 6))
component("gather_rows")(_unary(lambda x: gather_rows(x, [[2, 0, 1, 0], [1, 1, 3, 2]]), 2, 4, 3))
component("avg_pool2d")(_unary(lambda x: avg_pool2d(x, 2), 2, 2, 4, 4))


@component("layer_norm")
def _layer_norm_case(rng: np.random.Generator) -> Case:
    project = _Projection(rng)
    inputs = [_tensor(rng, 3, 6), _tensor(rng, 6), _tensor(rng, 6)]
    return (lambda x, gamma, beta: project(layer_norm(x, gamma, beta))), inputs, None


@component("concat")
def _concat_case(rng: np.random.Generator) -> Case:
    project = _Projection(rng)
    return (lambda a, b: project(concat([a, b], axis=-2))), [_tensor(rng, 2, 3, 4), _tensor(rng, 2, 1, 4)], None


@component("conv2d")
def _conv2d_case(rng: np.random.Generator) -> Case:
    project = _Projection(rng)
    inputs = [_tensor(rng, 2, 2, 5, 5), _tensor(rng, 3, 2, 3, 3), _tensor(rng, 3)]
    return (lambda x, weight, bias: project(conv2d(x, weight, bias))), inputs, None


# -- attention ----------------------------------------------------------------------
@component("mhsa")
def _mhsa_case(rng: np.random.Generator) -> Case:
    params = _randomized(AttentionParams(8, 2, rng), rng)
    project = _Projection(rng)
    return (lambda tokens: project(mhsa(tokens, params))), [_tensor(rng, 2, 3, 8)], None


@component("transformer_block")
def _block_case(rng: np.random.Generator) -> Case:
    block = _randomized(TransformerBlock(8, 2, 2, rng), rng)
    project = _Projection(rng)
    return (lambda tokens: project(transformer_block(tokens, block))), [_tensor(rng, 2, 4, 8)], None


@component("cross_attention_block")
def _cross_block_case(rng: np.random.Generator) -> Case:
    block = _randomized(CrossAttentionBlock(8, 2, 2, rng), rng)
    project = _Projection(rng)
    return (lambda query, parts: project(cross_attention_block(query, parts, block))), [_tensor(rng, 2, 1, 8), _tensor(rng, 2, 3, 8)], None


@component("align_self_attn")
def _self_aligner_case(rng: np.random.Generator) -> Case:
    aligner = _randomized(AttnAligner(8, 6, rng, num_layers=2, heads=2, expansion=2), rng)
    project = _Projection(rng)
    return (lambda tokens: project(align_self_attn(PartTokens(stage=1, tokens=tokens), aligner))), [_tensor(rng, 2, 3, 8)], None


@component("align_cross_attn")
def _cross_aligner_case(rng: np.random.Generator) -> Case:
    aligner = _randomized(CrossAttnAligner(6, 8, 6, rng, num_layers=2, heads=2, expansion=2), rng)
    project = _Projection(rng)
    inputs = [_tensor(rng, 2, 6), _tensor(rng, 2, 3, 8)]
    return (lambda global_repr, tokens: project(align_cross_attn(global_repr, PartTokens(stage=1, tokens=tokens), aligner))), inputs, None


# -- losses ---------------------------------------------------------------------------
@component("unifier_phi")
def _phi_case(rng: np.random.Generator) -> Case:
    phi = _randomized(UnifierPhi(3, 4, 5, 8, rng), rng)
    project = _Projection(rng)
    return (lambda tokens: project(phi(PartTokens(stage=1, tokens=tokens)))), [_tensor(rng, 2, 3, 4)], None


@component("kl_div")
def _kl_case(rng: np.random.Generator) -> Case:
    return (lambda p, q: sum_over_axis(kl_div(p, q, tau=2.0))), [_tensor(rng, 3, 5), _tensor(rng, 3, 5)], None


@component("reg_loss")
def _reg_case(rng: np.random.Generator) -> Case:
    inputs = [_tensor(rng, 2, 5) for _ in range(6)]
    return (lambda *stages: reg_loss(stages[:3], stages[3:], tau=1.5)), inputs, None


@component("total_loss")
def _total_case(rng: np.random.Generator) -> Case:
    labels = rng.integers(0, 4, size=2)
    inputs = [_tensor(rng, 2, 4) for _ in range(3)] + [_tensor(rng, 2, 3, 4), _tensor(rng)]
    return (lambda g1, g2, g3, parts, reg: total_loss([g1, g2, g3], parts, reg, labels, lambda_reg=0.7, lambda_part=1.3)), inputs, None


# -- miniature end-to-end models ----------------------------------------------------
def _end_to_end(kind: str) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        config = ModelConfig.miniature()
        model = TwoStreamNet(config, AlignmentVariant(kind, layers=1), rng).astype(CHECK_DTYPE)
        # default init leaves unifier gradients near 1e-7, below central-difference noise
        for head in model.heads:
            _randomized(head.projection, rng)
        if model.phi is not None:
            _randomized(model.phi, rng)
        if model.aligner is not None:
            _randomized(model.aligner, rng, scale=0.3)
        images = rng.uniform(size=(2, config.in_channels, config.image_size, config.image_size))
        labels = rng.integers(0, config.num_classes, size=2)
        bank = None
        if kind == "graphmatch":
            with no_grad():
                maps, _, _ = model.global_pass(model.as_batch(images))
                tokens, _ = model.encode_parts(model.as_batch(images), model.propose(maps[-1].data))
            bank = CorrelationBank(config.num_parts, c_ref=correlation(tokens[-1]).mean(axis=0))
        inputs = [model.backbone.stages[-1].weight, model.heads[-1].projection.weight, model.heads[0].classifier.weight]
        inputs.append(model.phi.fc1.weight if model.phi is not None else model.aligner.pool_mlp.fc1.weight)

        def f(*_parameters: Tensor) -> Tensor:
            return model.forward_train(images, labels, bank=bank, update_bank=False).total

        return f, inputs, END_TO_END_COORDS

    return build


for _kind in ("none", "graphmatch", "selfattn", "crossattn"):
    component(f"end_to_end_{_kind}")(_end_to_end(_kind))


def run_gradcheck(
    names: Iterable[str] | None = None,
    seeds: Sequence[int] = GRADCHECK_SEEDS,
    tol: float = GRADCHECK_TOLERANCE,
) -> list[ComponentResult]:
    """Check every named component (all registered ones by default) over ``seeds``."""
    names = list(COMPONENTS) if names is None else list(names)
    unknown = [name for name in names if name not in COMPONENTS]
    if unknown:
        raise KeyError(f"Unknown gradcheck component(s): {unknown}")
    results = []
    for name in names:
        worst, checked = 0.0, 0
        for seed in seeds:
            f, inputs, max_coords = COMPONENTS[name](np.random.default_rng([seed, zlib.crc32(name.encode())]))
            pick = "largest" if max_coords is not None else "random"
            report = grad_check(f, inputs, tol=tol, max_coords=max_coords, seed=seed, pick=pick)
            worst = max(worst, report.max_rel_err)
            checked += report.coordinates_checked
        result = ComponentResult(name=name, max_rel_err=worst, passed=worst <= tol, seeds=len(seeds), coordinates_checked=checked)
        logger.debug(f"gradcheck {name}: max rel err {worst:.3e}", extra={"fields": {"component": name, "max_rel_err": worst}})
        results.append(result)
    return results


def render_report(results: Sequence[ComponentResult], color: bool = True) -> str:
    lines = []
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        if color:
            status = colorize(status, status_color(result.passed))
        lines.append(f"{result.name:<24}{result.max_rel_err:>12.3e}  {status}")
    failed = sum(not result.passed for result in results)
    lines.append(f"{len(results) - failed}/{len(results)} components within tolerance")
    return "\n".join(lines)
