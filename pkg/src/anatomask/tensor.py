"""Dense tensors with reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor;
``Tensor.backward`` walks the recorded graph in reverse topological order.
Broadcasting is deliberately limited to tensor-vs-scalar; anything else must
go through :func:`broadcast_to`, which makes the expansion explicit in the graph.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ConfigurationError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "ones",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Parameters describe an impossible configuration."""


class NumericError(FloatingPointError):
    """A non-finite value was produced."""


_DEBUG = os.environ.get("ANATOMASK_RELEASE", "") == ""
_GRAD_ENABLED = True
_DTYPE = np.float64


def set_debug(flag: bool) -> None:
    """Toggle the finiteness check run after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported precision {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    return np.array(data, dtype=dtype or _DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -----------------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Iterable["Tensor"], backward, op: str) -> "Tensor":
        parents = tuple(parents)
        if _DEBUG and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by op '{op}'")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    def backward(self, grad=None) -> None:
        """Populate ``.grad`` of every tracked leaf reachable from this tensor.

        Leaf gradients accumulate across calls; intermediate buffers do not
        persist.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise ValueError("loss is not connected to any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=None if like is None else like.data.dtype)


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible "
                         "(only exact match or scalar broadcast)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _binary_shapes(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _binary_shapes(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _binary_shapes(a, b, "mul")
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
                        "mul")


def div(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    return Tensor._make(out, (a, b),
                        lambda g: (_reduce_to(g / b.data, a.shape),
                                   _reduce_to(-g * out / b.data, b.shape)), "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._make(a.data * s, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def signed_power(a: Tensor, p: float) -> Tensor:
    """``sign(a) * |a|**p`` so fractional exponents stay real on signed inputs."""
    p = float(p)
    if p == 1.0:
        return a
    mag = np.abs(a.data)
    out = np.sign(a.data) * mag ** p
    return Tensor._make(out, (a,), lambda g: (g * p * mag ** (p - 1.0),), "signed_pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def safe_sqrt(a: Tensor) -> Tensor:
    """``sqrt`` whose derivative is taken as 0 where the input is exactly 0."""
    out = np.sqrt(a.data)
    pos = out > 0
    inv = np.where(pos, 0.5 / np.where(pos, out, 1.0), 0.0)
    return Tensor._make(out, (a,), lambda g: (g * inv,), "safe_sqrt")


def absolute(a: Tensor) -> Tensor:
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return Tensor._make(a.data * m, (a,), lambda g: (g * m,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    f = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return Tensor._make(a.data * f, (a,), lambda g: (g * f,), "leaky_relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input lies inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, sigmoid, relu."""
    unary = {"sigmoid": sigmoid, "relu": relu}
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in unary:
        return unary[op](_lift(a))
    if op in binary:
        return binary[op](a, b)
    if op == "scale":
        return scale(_lift(a), b)
    raise ValueError(f"unknown elementwise op '{op}'")


# -- reductions ----------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def masked_max(a: Tensor, mask: np.ndarray) -> Tensor:
    """Maximum over entries where ``mask`` is nonzero; gradient goes to the first argmax."""
    return _masked_extreme(a, mask, np.argmax, -np.inf, "masked_max")


def masked_min(a: Tensor, mask: np.ndarray) -> Tensor:
    return _masked_extreme(a, mask, np.argmin, np.inf, "masked_min")


def _masked_extreme(a: Tensor, mask, pick, fill, op) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"{op}: mask shape {mask.shape} != {a.shape}")
    if not mask.any():
        raise ValueError(f"{op}: empty mask")
    idx = pick(np.where(mask, a.data, fill))
    out = np.asarray(a.data.flat[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga.flat[idx] = g
        return (ga,)

    return Tensor._make(out, (a,), backward, op)


# -- shape ---------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style expansion; the gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, s in enumerate(a.shape) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return Tensor._make(out, (a,), backward, "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return Tensor._make(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor._make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tensors, backward, "stack")


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift_pair(a, b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for a vector ``x``."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"linear: weight {weight.shape} vs x {x.shape}")
    out = matmul(weight, x)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != out.shape:
            raise DimensionError(f"linear: bias {bias.shape} vs output {out.shape}")
        out = add(out, bias)
    return out
