"""Minimal reverse-mode neural toolkit over numpy.

A ``Tensor`` records its parents and a backward closure; ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates ``grad`` on every tensor that
requires it. Layers are ``Module`` subclasses holding ``Parameter`` tensors and numpy
buffers in declaration order, which is also the checkpoint order.
"""

import json
import logging
import struct
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from src.tools.errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STGM"
CHECKPOINT_VERSION = 1

_MAX_CHECKPOINT_BYTES = 512 * 1024 * 1024


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added to reach ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(key: Any) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other: Any) -> "Tensor":
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        return mul(self, power(as_tensor(other, self.dtype), -1.0))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data: Any):
        super().__init__(np.array(data, copy=True), requires_grad=True)


def as_tensor(value: Any, dtype: np.dtype | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, tuple(parents) if needs else (), backward if needs else None)


def add(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a._accumulate(-g)

    return _result(-a.data, (a,), backward)


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _result(a.data**exponent, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def tensor_sum(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tensor_mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[k] for k in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(a.data, axes), (a,), backward)


def index(a: Tensor, key: Any) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the backward pass."""

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        if _is_basic_index(key):
            full[key] = g
        else:
            np.add.at(full, key, g)
        a._accumulate(full)

    return _result(a.data[key], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> None:
        for t, part in zip(tensors, np.split(g, splits, axis=axis), strict=True):
            t._accumulate(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g: np.ndarray) -> None:
        for k, t in enumerate(tensors):
            t._accumulate(np.take(g, k, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def tensor_max(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first maximal entry."""
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return _result(np.take_along_axis(a.data, arg, axis=axis).squeeze(axis), (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant; no gradient flows there."""
    mask = np.broadcast_to(mask, a.shape)

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.where(mask, 0.0, g))

    return _result(np.where(mask, np.asarray(value, a.dtype), a.data), (a,), backward)


# activations


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * out)

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    decay = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay)).astype(x.dtype, copy=False)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * (1.0 - out * out))

    return _result(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * positive)

    return _result(np.where(positive, a.data, 0).astype(a.dtype, copy=False), (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    positive = a.data > 0
    scale = np.where(positive, 1.0, slope).astype(a.dtype)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * scale)

    return _result(a.data * scale, (a,), backward)


def _log_softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(_log_softmax_array(np.asarray(x), axis))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_array(a.data, axis)

    def backward(g: np.ndarray) -> None:
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_array(a.data, axis)
    probs = np.exp(out)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), backward)


def cross_entropy(
    logits: Tensor, labels: Any, weights: np.ndarray | None = None
) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[label]`` over rows of ``logits`` (M, C)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows, classes = logits.shape[0], logits.shape[-1]
    if logits.ndim != 2 or labels.shape[0] != rows:
        raise ShapeError(f"cross_entropy expects (M, C) logits and M labels, got {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    w = np.ones(rows) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("cross_entropy weights sum to zero")
    logp = _log_softmax_array(logits.data.astype(np.float64), -1)
    loss = -(w * logp[np.arange(rows), labels]).sum() / total

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[np.arange(rows), labels] -= 1.0
        grad *= (w / total)[:, None]
        logits._accumulate((g * grad).astype(logits.dtype))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so the expectation is kept."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


# initialisers


def glorot_uniform(
    rng: np.random.Generator, shape: tuple[int, int], dtype: Any = np.float32
) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, size: int, dtype: Any = np.float32) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def derive_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generators from one seed; child k is stable for any ``count`` > k."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


# modules


class Module:
    def __init__(self) -> None:
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for k, item in enumerate(value):
                    yield f"{name}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        unexpected = [k for k in state if k not in expected]
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True)
        for module_prefix, module in self._prefixed_modules():
            for name in module._buffers:
                value = state[module_prefix + name]
                dtype = module._buffers[name].dtype
                module._buffers[name] = np.array(value, dtype=dtype, copy=True)

    def _prefixed_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._prefixed_modules(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Dense(Module):
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        bias: bool = True,
        dtype: Any = np.float32,
    ):
        super().__init__()
        self.W = Parameter(glorot_uniform(rng, (in_dim, out_dim), dtype))
        self.b = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"dense expects last dim {self.W.shape[0]}, got {x.shape[-1]}")
        y = x @ self.W
        return y + self.b if self.b is not None else y


class GRU(Module):
    """Single-layer GRU; the final hidden state is the sequence embedding.

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * h~.
    """

    def __init__(
        self, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype: Any = np.float32
    ):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.W_z = Parameter(glorot_uniform(rng, (input_dim, hidden_dim), dtype))
        self.W_r = Parameter(glorot_uniform(rng, (input_dim, hidden_dim), dtype))
        self.W_h = Parameter(glorot_uniform(rng, (input_dim, hidden_dim), dtype))
        self.U_z = Parameter(orthogonal(rng, hidden_dim, dtype))
        self.U_r = Parameter(orthogonal(rng, hidden_dim, dtype))
        self.U_h = Parameter(orthogonal(rng, hidden_dim, dtype))
        self.b_z = Parameter(np.zeros(hidden_dim, dtype=dtype))
        self.b_r = Parameter(np.zeros(hidden_dim, dtype=dtype))
        self.b_h = Parameter(np.zeros(hidden_dim, dtype=dtype))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = sigmoid(x @ self.W_z + h @ self.U_z + self.b_z)
        r = sigmoid(x @ self.W_r + h @ self.U_r + self.b_r)
        candidate = tanh(x @ self.W_h + (r * h) @ self.U_h + self.b_h)
        return (1.0 - z) * h + z * candidate

    def forward(self, sequence: Tensor, h0: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
        """Run over ``sequence`` (B, S, F_in); returns the final state and every step's state."""
        if sequence.ndim != 3 or sequence.shape[-1] != self.input_dim:
            raise ShapeError(f"GRU expects (B, S, {self.input_dim}), got {sequence.shape}")
        if sequence.shape[1] < 1:
            raise ShapeError("GRU sequence must have at least one step")
        batch = sequence.shape[0]
        if h0 is None:
            h0 = Tensor(np.zeros((batch, self.hidden_dim), dtype=self.W_z.dtype))
        h = h0
        if h.shape != (batch, self.hidden_dim):
            raise ShapeError(f"h0 must be ({batch}, {self.hidden_dim}), got {h.shape}")
        states = []
        for t in range(sequence.shape[1]):
            h = self.step(sequence[:, t, :], h)
            states.append(h)
        return h, states


class BatchNorm(Module):
    """Batch normalization over rows of (M, d); running variance uses the unbiased estimate."""

    def __init__(
        self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, dtype: Any = np.float32
    ):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.scale = Parameter(np.ones(num_features, dtype=dtype))
        self.shift = Parameter(np.zeros(num_features, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self._buffers["running_var"] = np.ones(num_features, dtype=dtype)

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.scale.shape[0]:
            raise ShapeError(f"batch norm expects (M, {self.scale.shape[0]}), got {x.shape}")
        if self.training:
            rows = x.shape[0]
            if rows < 2:
                raise ShapeError("batch norm in train mode needs at least 2 rows")
            mean = x.mean(axis=0)
            centered = x - mean
            var = (centered * centered).mean(axis=0)
            m = self.momentum
            unbiased = var.data * rows / (rows - 1)
            running_mean = (1 - m) * self.running_mean + m * mean.data
            self._buffers["running_mean"] = running_mean.astype(self.running_mean.dtype)
            running_var = (1 - m) * self.running_var + m * unbiased
            self._buffers["running_var"] = running_var.astype(self.running_var.dtype)
            normalized = centered * power(var + self.eps, -0.5)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            normalized = (x - self.running_mean) * inv.astype(x.dtype)
        return normalized * self.scale + self.shift


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.training, self._rng)


# optimisation


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def _adam_update(
    param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, state: OptimizerState
) -> None:
    m *= state.beta1
    m += (1 - state.beta1) * grad
    v *= state.beta2
    v += (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**state.step)
    v_hat = v / (1 - state.beta2**state.step)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


def _ensure_moments(params: Sequence[np.ndarray], state: OptimizerState) -> None:
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, m in zip(params, state.m, strict=True):
        if p.shape != m.shape:
            raise ShapeError(f"optimizer moment {m.shape} does not match parameter {p.shape}")


def adamw_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: OptimizerState
) -> list[np.ndarray]:
    """One AdamW update; decay acts on the parameters directly, never through the moments."""
    if len(params) != len(grads):
        raise ShapeError("one gradient per parameter is required")
    _ensure_moments(params, state)
    state.step += 1
    updated = []
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        grad = np.zeros_like(p) if g is None else np.asarray(g, dtype=p.dtype)
        if grad.shape != p.shape:
            raise ShapeError(f"gradient {grad.shape} does not match parameter {p.shape}")
        p = np.array(p, copy=True)
        if state.weight_decay:
            p -= p * (state.lr * state.weight_decay)
        _adam_update(p, grad, m, v, state)
        updated.append(p)
    return updated


class AdamW:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.state = OptimizerState(lr, weight_decay, betas[0], betas[1], eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        updated = adamw_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state
        )
        for p, data in zip(self.params, updated, strict=True):
            p.data = data


class Adam(AdamW):
    """Adam with L2 regularisation folded into the gradient."""

    def step(self) -> None:
        state = self.state
        _ensure_moments([p.data for p in self.params], state)
        state.step += 1
        for p, m, v in zip(self.params, state.m, state.v, strict=True):
            grad = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=p.dtype)
            if state.weight_decay:
                grad = grad + state.weight_decay * p.data
            data = np.array(p.data, copy=True)
            _adam_update(data, grad, m, v, state)
            p.data = data


# gradient checking


def numerical_gradient(
    loss_fn: Callable[[], float], param: Parameter, step: float = 1e-3
) -> np.ndarray:
    """Central finite differences of ``loss_fn`` with respect to ``param`` (perturbed in place)."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    it = np.nditer(param.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = param.data[idx]
        param.data[idx] = original + step
        upper = loss_fn()
        param.data[idx] = original - step
        lower = loss_fn()
        param.data[idx] = original
        grad[idx] = (upper - lower) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(
    module: Module, loss_fn: Callable[[], Tensor], step: float = 1e-3
) -> dict[str, float]:
    """Relative error between backprop and finite differences for every parameter."""
    module.zero_grad()
    loss_fn().backward()
    analytic = {
        name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for name, p in module.named_parameters()
    }
    errors = {}
    for name, p in module.named_parameters():
        numeric = numerical_gradient(lambda: float(loss_fn().data), p, step)
        errors[name] = relative_error(analytic[name], numeric)
    return errors


# checkpoints


def save_checkpoint(
    path: str | Path, descriptor: Mapping[str, Any], tensors: Mapping[str, np.ndarray]
) -> None:
    """Write magic, version, JSON descriptor and named little-endian float32 tensors."""
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    sidecar = Path(f"{path}.json")
    sidecar.write_text(json.dumps(descriptor, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info("checkpoint written to %s (%d tensors)", path, len(tensors))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) > _MAX_CHECKPOINT_BYTES:
        raise CheckpointError(f"checkpoint larger than {_MAX_CHECKPOINT_BYTES} bytes")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint")
    try:
        version, blob_len = struct.unpack_from("<HI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 10
        descriptor = json.loads(data[offset : offset + blob_len].decode("utf-8"))
        offset += blob_len
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            array = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            tensors[name] = array.reshape(shape).astype(np.float32)
            offset += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if offset != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return descriptor, tensors
