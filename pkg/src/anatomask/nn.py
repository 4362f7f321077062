"""Parameter containers and the Adam optimiser."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set at
    construction; submodules and lists of submodules are traversed.
    Names are dotted paths, stable across runs, used as checkpoint keys.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and getattr(value, "_param", False):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and getattr(item, "_param", False):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


# Tensor uses __slots__, so parameters are marked through a subclass
class Parameter(Tensor):
    __slots__ = ("_param",)

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self._param = True


def kaiming(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0 ** 0.5) -> Parameter:
    std = gain / np.sqrt(max(fan_in, 1))
    return Parameter(rng.normal(0.0, std, size=shape).astype(get_default_dtype()))


def zeros_param(shape) -> Parameter:
    return Parameter(np.zeros(shape, dtype=get_default_dtype()))


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, dilation: int = 1, bias: bool = True, gain: float = 2.0 ** 0.5):
        self.weight = kaiming(rng, (c_out, c_in, k, k), c_in * k * k, gain)
        self.bias = zeros_param((c_out,)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Adam:
    """Adam with bias correction; state is exposed for checkpointing."""

    def __init__(self, params: list[Tensor], lr: float = 2e-4, beta1: float = 0.1,
                 beta2: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]
