"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable computation in PartAlign is expressed with the
primitives in this module. A primitive computes its output with numpy and
records ``(op, parents, ctx)`` on the output tensor. ``Tensor.backward``
walks the recorded nodes in exact reverse creation order and asks the rule
registered under ``GRADIENT_RULES[op]`` for the parents' gradients.

Rules are looked up by name at backward time, so a rule can be swapped out
(``unittest.mock.patch.dict(GRADIENT_RULES, ...)``) to check that the
gradient checker notices a broken derivative.
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Literal, Sequence

import numpy as np

from PartAlign.errors import GraphConsumedError, NonFiniteError, ShapeMismatchError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

GradientRule = Callable[[object, np.ndarray], tuple]
GRADIENT_RULES: dict[str, GradientRule] = {}

_creation_counter = itertools.count()
_grad_mode = threading.local()


def register_rule(op_name: str) -> Callable[[GradientRule], GradientRule]:
    """Register ``rule(ctx, grad_out) -> tuple of parent grads`` under ``op_name``."""

    def decorator(rule: GradientRule) -> GradientRule:
        GRADIENT_RULES[op_name] = rule
        return rule

    return decorator


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward computations without recording a graph (evaluation, finite differences)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        else:
            array = np.asarray(data)
            if not np.issubdtype(array.dtype, np.floating):
                array = array.astype(TRAIN_DTYPE)
        if any(extent < 1 for extent in array.shape):
            raise ShapeMismatchError("Tensor", array.shape, message=f"Tensor extents must be positive, got {array.shape}")
        self.data: np.ndarray = array
        self.requires_grad: bool = requires_grad
        self.grad: np.ndarray | None = None
        self._op: str | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._ctx = None
        self._consumed: bool = False
        self._seq: int = next(_creation_counter)

    # -- introspection -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{op})"

    # -- operator sugar ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor / Tensor is not supported; divide by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_over_axis(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_over_axis(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int = -1, keepdims: bool = False):
        return max_over_axis(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)

    def softmax(self, axis: int = -1):
        return softmax(self, axis=axis)

    # -- reverse mode ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf with ``requires_grad`` reachable from this scalar.

        Leaves that are reachable but receive no gradient flow get zeros. The
        graph is consumed: calling backward again without a new forward raises
        GraphConsumedError.
        """
        if self.data.size != 1:
            raise ShapeMismatchError("backward", self.shape, message=f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumedError()
        nodes = _reachable(self)
        nodes.sort(key=lambda node: node._seq, reverse=True)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            grad_out = pending.pop(id(node), None)
            if node._op is None:
                if node.requires_grad:
                    if grad_out is None:
                        grad_out = np.zeros_like(node.data)
                    grad_out = grad_out.astype(node.data.dtype, copy=False)
                    node.grad = grad_out if node.grad is None else node.grad + grad_out
                continue
            if node._consumed:
                raise GraphConsumedError()
            if grad_out is None:
                continue
            parent_grads = GRADIENT_RULES[node._op](node._ctx, grad_out)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise ShapeMismatchError(f"backward[{node._op}]", parent_grad.shape, parent.shape)
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        for node in nodes:
            if node._op is not None:
                node._consumed = True
                node._ctx = None


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    stack = [root]
    found: list[Tensor] = []
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        found.append(node)
        stack.extend(node._parents)
    return found


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain operands in the dtype of the Tensor operand, whichever side it is on."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._ctx = ctx
    return out


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(where)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it from ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


# -- elementwise arithmetic ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        data = a.data + b.data
    except ValueError as error:
        raise ShapeMismatchError("add", a.shape, b.shape) from error
    return record("add", data, (a, b), (a.shape, b.shape))


@register_rule("add")
def _add_rule(ctx, grad):
    shape_a, shape_b = ctx
    return unbroadcast(grad, shape_a), unbroadcast(grad, shape_b)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        data = a.data - b.data
    except ValueError as error:
        raise ShapeMismatchError("sub", a.shape, b.shape) from error
    return record("sub", data, (a, b), (a.shape, b.shape))


@register_rule("sub")
def _sub_rule(ctx, grad):
    shape_a, shape_b = ctx
    return unbroadcast(grad, shape_a), unbroadcast(-grad, shape_b)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        data = a.data * b.data
    except ValueError as error:
        raise ShapeMismatchError("mul", a.shape, b.shape) from error
    return record("mul", data, (a, b), (a.data, b.data))


@register_rule("mul")
def _mul_rule(ctx, grad):
    a, b = ctx
    return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


def neg(x: Tensor) -> Tensor:
    return record("neg", -x.data, (x,))


@register_rule("neg")
def _neg_rule(ctx, grad):
    return (-grad,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return record("matmul", np.matmul(a.data, b.data), (a, b), (a.data, b.data))


@register_rule("matmul")
def _matmul_rule(ctx, grad):
    a, b = ctx
    grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
    grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
    return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


# -- nonlinearities --------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    return record("relu", np.maximum(x.data, 0), (x,), x.data > 0)


@register_rule("relu")
def _relu_rule(mask, grad):
    return (grad * mask,)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    tanh_inner = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + tanh_inner)
    return record("gelu", data, (x,), (x.data, tanh_inner))


@register_rule("gelu")
def _gelu_rule(ctx, grad):
    x, tanh_inner = ctx
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    local = 0.5 * (1.0 + tanh_inner) + 0.5 * x * (1.0 - tanh_inner**2) * d_inner
    return (grad * local,)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return record("exp", data, (x,), data)


@register_rule("exp")
def _exp_rule(out, grad):
    return (grad * out,)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log", "log is only defined for strictly positive inputs.")
    return record("log", np.log(x.data), (x,), x.data)


@register_rule("log")
def _log_rule(x, grad):
    return (grad / x,)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", data, (x,), (data, axis))


@register_rule("softmax")
def _softmax_rule(ctx, grad):
    y, axis = ctx
    return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return record("log_softmax", data, (x,), (data, axis))


@register_rule("log_softmax")
def _log_softmax_rule(ctx, grad):
    out, axis = ctx
    return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then ``gamma * x + beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatchError("layer_norm", x.shape, gamma.shape, beta.shape)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    data = normalized * gamma.data + beta.data
    return record("layer_norm", data, (x, gamma, beta), (normalized, inv_std, gamma.data))


@register_rule("layer_norm")
def _layer_norm_rule(ctx, grad):
    normalized, inv_std, gamma = ctx
    d_normalized = grad * gamma
    grad_x = inv_std * (
        d_normalized
        - d_normalized.mean(axis=-1, keepdims=True)
        - normalized * (d_normalized * normalized).mean(axis=-1, keepdims=True)
    )
    leading = tuple(range(grad.ndim - 1))
    return grad_x, (grad * normalized).sum(axis=leading), grad.sum(axis=leading)


# -- shape manipulation ----------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as error:
        raise ShapeMismatchError("concat", *(t.shape for t in tensors)) from error
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", data, tensors, (axis, boundaries))


@register_rule("concat")
def _concat_rule(ctx, grad):
    axis, boundaries = ctx
    return tuple(np.split(grad, boundaries, axis=axis))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        if x.ndim >= 2:
            axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    return record("transpose", np.transpose(x.data, axes), (x,), tuple(np.argsort(axes)))


@register_rule("transpose")
def _transpose_rule(inverse_axes, grad):
    return (np.transpose(grad, inverse_axes),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as error:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape)) from error
    return record("reshape", data, (x,), x.shape)


@register_rule("reshape")
def _reshape_rule(original_shape, grad):
    return (grad.reshape(original_shape),)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows along axis -2: ``out[..., m, :] = x[..., index[..., m], :]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.ndim != x.ndim - 1 or index.shape[:-1] != x.shape[:-2]:
        raise ShapeMismatchError("gather_rows", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= x.shape[-2]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[-2]} rows")
    data = np.take_along_axis(x.data, index[..., None], axis=-2)
    return record("gather_rows", data, (x,), (x.shape, index))


@register_rule("gather_rows")
def _gather_rows_rule(ctx, grad):
    shape, index = ctx
    rows, width = shape[-2], shape[-1]
    flat_index = index.reshape(-1, index.shape[-1])
    flat_grad = grad.reshape(flat_index.shape[0], flat_index.shape[1], width)
    out = np.zeros((flat_index.shape[0], rows, width), dtype=grad.dtype)
    np.add.at(out, (np.arange(flat_index.shape[0])[:, None], flat_index), flat_grad)
    return (out.reshape(shape),)


# -- reductions ------------------------------------------------------------------
def sum_over_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    return record("sum", np.asarray(data), (x,), (x.shape, _normalize_axes(axis, x.ndim), keepdims))


@register_rule("sum")
def _sum_rule(ctx, grad):
    shape, axes, keepdims = ctx
    if not keepdims:
        grad = np.expand_dims(grad, axes)
    return (np.broadcast_to(grad, shape).copy(),)


def mean_over_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.mean(axis=axis, keepdims=keepdims)
    return record("mean", np.asarray(data), (x,), (x.shape, axes, keepdims, count))


@register_rule("mean")
def _mean_rule(ctx, grad):
    shape, axes, keepdims, count = ctx
    if not keepdims:
        grad = np.expand_dims(grad, axes)
    return (np.broadcast_to(grad / count, shape).copy(),)


def max_over_axis(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    argmax = np.expand_dims(x.data.argmax(axis=axis), axis)
    data = np.take_along_axis(x.data, argmax, axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)
    return record("max", data, (x,), (x.shape, axis, argmax, keepdims))


@register_rule("max")
def _max_rule(ctx, grad):
    shape, axis, argmax, keepdims = ctx
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    out = np.zeros(shape, dtype=grad.dtype)
    np.put_along_axis(out, argmax, grad, axis=axis)
    return (out,)


# -- parameter containers --------------------------------------------------------
class Module:
    """Attribute-walking parameter container.

    Parameters are the ``requires_grad`` tensors held directly as attributes,
    inside child modules, or inside lists of child modules; names follow the
    attribute path (``blocks.0.attention.w_q``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{index}.")

    def parameters(self) -> list[Tensor]:
        return [parameter for _, parameter in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(parameter.data.size for parameter in self.parameters()))

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.grad = np.zeros_like(parameter.data)

    def astype(self, dtype) -> "Module":
        for parameter in self.parameters():
            parameter.data = parameter.data.astype(dtype)
            parameter.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: parameter.data for name, parameter in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"State mismatch. Missing: {missing}. Unexpected: {unexpected}")
        for name, parameter in own.items():
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise ShapeMismatchError(f"load_state_dict[{name}]", value.shape, parameter.shape)
            parameter.data = value.astype(parameter.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=TRAIN_DTYPE) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_parameter(shape: tuple[int, ...], dtype=TRAIN_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_parameter(shape: tuple[int, ...], dtype=TRAIN_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            self.weight = zeros_parameter((in_features, out_features))
        else:
            self.weight = uniform_fan_in(rng, (in_features, out_features), in_features)
        self.bias = zeros_parameter((out_features,))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeMismatchError("Linear", x.shape, (self.in_features, self.out_features))
        if x.ndim == 1:
            return reshape(matmul(reshape(x, (1, self.in_features)), self.weight), (self.out_features,)) + self.bias
        return matmul(x, self.weight) + self.bias


# -- finite-difference verification ----------------------------------------------
@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    coordinates_checked: int


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    pick: Literal["random", "largest"] = "random",
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_coords`` set, each input contributes at most that many coordinates:
    drawn deterministically from ``seed`` (``pick="random"``), or the ones
    with the largest analytic gradient magnitude (``pick="largest"``).
    """
    if pick not in ("random", "largest"):
        raise ValueError(f"Unknown coordinate pick: {pick}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for tensor in inputs:
        if tensor.dtype != CHECK_DTYPE:
            raise TypeError(f"grad_check requires {np.dtype(CHECK_DTYPE).name} inputs, got {tensor.dtype}")
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.requires_grad = True
        tensor.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [tensor.grad.copy() for tensor in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            flat_grad = grad.reshape(-1)
            coordinates = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                if pick == "largest":
                    coordinates = np.sort(np.argsort(-np.abs(flat_grad), kind="stable")[:max_coords])
                else:
                    coordinates = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coordinates:
                original = flat[i]
                flat[i] = original + h
                upper = f(*inputs).data.item()
                flat[i] = original - h
                lower = f(*inputs).data.item()
                flat[i] = original
                numeric = (upper - lower) / (2 * h)
                exact = float(flat_grad[i])
                denominator = max(abs(exact), abs(numeric), 1e-8)
                worst = max(worst, abs(exact - numeric) / denominator)
                checked += 1
    return GradCheckReport(max_rel_err=worst, passed=worst <= tol, coordinates_checked=checked)
