"""
Dense tensor kernel with tape-based reverse-mode differentiation.

Every operation returns a new Tensor that remembers its inputs and a closure
mapping the output gradient to input gradients. `backward` walks that tape in
reverse topological order and accumulates into Parameter.grad.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
MASK_FILL = -1e30

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand extents do not agree."""


class NonFiniteError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


class MissingGradientError(RuntimeError):
    """Raised when an optimizer step finds a parameter without a gradient."""


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """An n-dimensional array plus the tape entry that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf with a gradient buffer of identical shape."""

    __slots__ = ("name", "grad")

    def __init__(self, data: ArrayLike, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, op="param")
        self.name = name
        self.grad: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _lift(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    """Lift constants to tensors in the dtype of the other operand."""
    if isinstance(a, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor):
        return _lift(a, b.dtype), b
    return _lift(a), _lift(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    out = np.where(active, x.data, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * active,)

    return _result(out, (x,), backward, "relu")


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with inputs clamped from below at `floor`."""
    clamped = np.maximum(x.data, floor)
    out = np.log(clamped)

    def backward(g):
        return (np.where(x.data > floor, g / clamped, 0.0),)

    return _result(out, (x,), backward, "log")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.swapaxes(x.data, axis1, axis2)

    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _result(out, (x,), backward, "swapaxes")


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _result(out, (x,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices of `x` along `axis`; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(np.moveaxis(grad, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _result(out, (x,), backward, "take")


def segment_mean(x: Tensor, segment_ids: Sequence[int], num_segments: int) -> Tensor:
    """Mean of the rows of `x` sharing a segment id; output has `num_segments` rows."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_mean: {seg.shape[0]} ids for {x.shape[0]} rows")
    counts = np.bincount(seg, minlength=num_segments).astype(x.dtype)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: every segment needs at least one row")
    totals = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(totals, seg, x.data)
    scale = counts.reshape((-1,) + (1,) * (x.ndim - 1))
    out = totals / scale

    def backward(g):
        return ((g / scale)[seg],)

    return _result(out, (x,), backward, "segment_mean")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = xW + b over the last axis of `x`."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    flat = x.data.reshape(-1, weight.shape[0])
    out = (flat @ weight.data + bias.data).reshape(x.shape[:-1] + (weight.shape[1],))

    def backward(g):
        g_flat = g.reshape(-1, weight.shape[1])
        gx = (g_flat @ weight.data.T).reshape(x.shape)
        return gx, flat.T @ g_flat, g_flat.sum(axis=0)

    return _result(out, (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _check_last_axis(x: Tensor, op: str) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"{op} needs a non-empty last axis, got shape {x.shape}")


def softmax(logits: Tensor) -> Tensor:
    _check_last_axis(logits, "softmax")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (logits,), backward, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    """logits - logsumexp(logits), never log(softmax)."""
    _check_last_axis(logits, "log_softmax")
    peak = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - peak
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        probs = np.exp(out)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    _check_last_axis(x, "layer_norm")
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/shift {shift.shape} do not fit width {d}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered / sigma
    out = xhat * gain.data + shift.data

    def backward(g):
        ghat = g * gain.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        gx = (ghat - m1 - xhat * m2) / sigma
        g_flat = g.reshape(-1, d)
        return gx, (g_flat * xhat.reshape(-1, d)).sum(axis=0), g_flat.sum(axis=0)

    return _result(out, (x, gain, shift), backward, "layer_norm")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor


def multi_head_attention(
    tokens: Tensor,
    params: AttentionParams,
    heads: int,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Scaled dot-product self-attention over all tokens, without positions.

    Args:
        tokens: [..., T, d] token matrix (a leading batch axis is allowed).
        params: projection weights, each d x d.
        heads: number of heads; must divide d.
        key_mask: optional boolean [..., T]; False keys receive zero weight.
    """
    d = tokens.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ShapeError(f"model width {d} is not divisible by {heads} heads")
    head_dim = d // heads

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, t.shape[:-1] + (heads, head_dim)), -3, -2)

    q = split(linear(tokens, params.w_q, params.b_q))
    k = split(linear(tokens, params.w_k, params.b_k))
    v = split(linear(tokens, params.w_v, params.b_v))

    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(head_dim))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL).astype(tokens.dtype)
        scores = add(scores, Tensor(bias[..., None, None, :]))
    context = matmul(softmax(scores), v)
    merged = reshape(swapaxes(context, -3, -2), tokens.shape)
    return linear(merged, params.w_o, params.b_o)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> None:
    """
    Accumulate d(loss)/d(param) into each parameter's `grad`.

    Parameters in `params` that the loss does not depend on get a zero
    gradient buffer. Gradients add onto whatever is already stored; call
    `zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets: Dict[int, Parameter] = {}
    if params is not None:
        targets = {id(p): p for p in params}

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if params is None or id(node) in targets:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for p in targets.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Moment buffers keyed by parameter name, plus the update rule's settings."""

    rule: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def create_optimizer_state(params: Iterable[Parameter], rule: str = "adam", **settings) -> OptimizerState:
    if rule not in ("adam", "sgd"):
        raise ValueError(f"Unknown optimizer rule: {rule}")
    state = OptimizerState(rule=rule, **settings)
    for p in params:
        state.first_moment[p.name] = np.zeros_like(p.data)
        if rule == "adam":
            state.second_moment[p.name] = np.zeros_like(p.data)
    return state


def optimizer_step(state: OptimizerState, params: Iterable[Parameter]) -> None:
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise MissingGradientError(f"No gradient for parameters: {', '.join(missing)}")

    state.step += 1
    for p in params:
        m = state.first_moment.setdefault(p.name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ShapeError(f"Moment buffer for {p.name} has shape {m.shape}, parameter {p.shape}")
        if state.rule == "sgd":
            m *= state.momentum
            m += p.grad
            p.data -= state.lr * m
            continue
        v = state.second_moment.setdefault(p.name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        m_hat = m / (1.0 - state.beta1 ** state.step)
        v_hat = v / (1.0 - state.beta2 ** state.step)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
