"""
Minimal dense tensor with reverse-mode automatic differentiation.

Every operation that involves a tensor requiring gradients records its
parents and a backward closure. ``Tensor.backward`` replays the recorded
operations in exact reverse execution order (each tensor carries a global
sequence number assigned at creation). All values are float64.

Leading batch dimensions broadcast through every op, so the same code path
serves a single ``n x m`` window and a ``batch x n x m`` minibatch.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError, StateError

_SEQ = itertools.count()
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = ""):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data.astype(np.float64, copy=False)
        record = _GRAD_ENABLED[0] and any(p.requires_grad for p in _parents)
        self.requires_grad = bool(requires_grad) or record
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = tuple(_parents) if record else ()
        self._backward: Optional[Callable] = _backward if record else None
        self._op = _op if record else ""
        self._seq = next(_SEQ)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    def graph(self) -> list:
        """Recorded non-leaf tensors reachable from ``self``, in execution order."""
        return [t for t in _reachable(self) if not t.is_leaf]

    def backward(self, grad=None) -> None:
        if self.data.size != 1 and grad is None:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise StateError("loss does not depend on any tensor requiring gradients")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        grads = {id(self): seed}
        for node in sorted(_reachable(self), key=lambda t: t._seq, reverse=True):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    @property
    def T(self):
        return swap_last(self)


def _reachable(root: Tensor) -> list:
    seen, out, stack = set(), [], [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    out.sort(key=lambda t: t._seq)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        _parents=(a, b),
        _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        _op="add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        _parents=(a, b),
        _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        _op="sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        _parents=(a, b),
        _backward=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        _op="mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data / b.data,
        _parents=(a, b),
        _backward=lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        _op="div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        a.data**exponent,
        _parents=(a,),
        _backward=lambda g: (g * exponent * a.data ** (exponent - 1),),
        _op="pow",
    )


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * out,), _op="exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), _parents=(a,), _backward=lambda g: (g / a.data,), _op="log")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward=lambda g: (g * mask,), _op="relu")


# -- shape ----------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=lambda g: (g.reshape(old),), _op="reshape")


def swap_last(a: Tensor) -> Tensor:
    """Transpose the two trailing axes."""
    a = as_tensor(a)
    return Tensor(
        np.swapaxes(a.data, -1, -2),
        _parents=(a,),
        _backward=lambda g: (np.swapaxes(g, -1, -2),),
        _op="transpose",
    )


# -- reductions -----------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=backward, _op="sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=backward, _op="matmul")


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, _parents=(x,), _backward=backward, _op="softmax")


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, _parents=(x,), _backward=backward, _op="log_softmax")


def global_avg_pool(x) -> Tensor:
    """Mean over the time axis (second to last): ``[..., n, d] -> [..., 1, d]``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ContractError(f"global_avg_pool needs at least one time step, got shape {x.shape}")
    return mean(x, axis=x.ndim - 2, keepdims=True)


class BatchNormStats:
    """Running mean/variance for one BatchNorm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean: Optional[np.ndarray] = None
        self.running_var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if not self.initialized:
            self.running_mean = batch_mean.copy()
            self.running_var = batch_var.copy()
        else:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * batch_mean
            self.running_var = (1 - m) * self.running_var + m * batch_var

    def affine(self, gamma: np.ndarray, beta: np.ndarray):
        """Per-channel ``(scale, offset)`` of the eval-mode transform."""
        if not self.initialized:
            raise StateError("BatchNorm running statistics are not initialised")
        scale = gamma / np.sqrt(self.running_var + self.eps)
        return scale, beta - scale * self.running_mean


def batchnorm(x, gamma, beta, stats: BatchNormStats, mode: str = "train") -> Tensor:
    """Normalise every channel (last axis) over all remaining axes."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[-1] != stats.channels:
        raise ShapeError(f"batchnorm: input shape {x.shape} vs {stats.channels} channels")
    if mode == "eval":
        if not stats.initialized:
            raise StateError("BatchNorm running statistics are not initialised")
        inv = 1.0 / np.sqrt(stats.running_var + stats.eps)
        return (x - stats.running_mean) * (gamma * inv) + beta
    axes = tuple(range(x.ndim - 1))
    mu = mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=axes, keepdims=True)
    stats.update(mu.data.reshape(-1), var.data.reshape(-1))
    return centered * power(var + stats.eps, -0.5) * gamma + beta


# -- straight-through replacement -------------------------------------------
class SteTape:
    """Records the residuals of straight-through ops so they can be replayed.

    While a tape is active, the first forward pass stores, for every
    straight-through call, ``value - x`` and the gradient mask. After
    ``rewind()`` subsequent passes reuse them (masked-out entries keep their
    recorded value), turning the quantized forward into a piecewise smooth
    function of its inputs whose exact gradient is the straight-through
    gradient. Finite-difference checks rely on this.
    """

    def __init__(self):
        self.entries: list = []
        self.cursor: Optional[int] = None

    def rewind(self) -> None:
        self.cursor = 0


_TAPE: list = [None]


@contextlib.contextmanager
def freeze_straight_through():
    prev = _TAPE[0]
    tape = SteTape()
    _TAPE[0] = tape
    try:
        yield tape
    finally:
        _TAPE[0] = prev


def straight_through(x, value: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Output ``value`` in the forward pass; pass ``grad * mask`` back to ``x``."""
    x = as_tensor(x)
    tape = _TAPE[0]
    if tape is not None:
        if tape.cursor is None:
            tape.entries.append((value - x.data, None if mask is None else mask.copy(), np.array(value, dtype=np.float64)))
        else:
            residual, mask, recorded = tape.entries[tape.cursor]
            tape.cursor += 1
            value = x.data + residual
            if mask is not None:
                # clamped entries stay flat, matching their zero gradient
                value = np.where(mask, value, recorded)
    if mask is None:
        backward = lambda g: (g,)  # noqa: E731
    else:
        backward = lambda g: (g * mask,)  # noqa: E731
    return Tensor(np.asarray(value, dtype=np.float64), _parents=(x,), _backward=backward, _op="ste")


def concat_params(tensors: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for t in tensors])
