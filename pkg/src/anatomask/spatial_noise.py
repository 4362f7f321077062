"""Volume-aligned Gaussian noise and its residual injection into feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .nn import Conv2d, Module, zeros_param
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class NoiseVolume:
    dims: tuple[int, int, int]
    values: np.ndarray
    seed: int
    smooth_sigma: float

    @property
    def depth(self) -> int:
        return self.dims[0]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_axis(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one axis with ``kernel`` under reflect boundaries."""
    n = values.shape[axis]
    if n == 1:
        return values
    r = len(kernel) // 2
    moved = np.moveaxis(values, axis, 0)
    # np.pad reflect cannot exceed n - 1 in one go; index the mirror explicitly
    period = 2 * (n - 1)
    src = np.arange(-r, n + r) % period
    src = np.where(src >= n, period - src, src)
    padded = moved[src]
    out = np.zeros_like(moved)
    for i, w in enumerate(kernel):
        out += w * padded[i:i + n]
    return np.moveaxis(out, 0, axis)


def make_noise_volume(dims, seed: int, smooth_sigma: float = 1.0) -> NoiseVolume:
    """Standard Gaussian field, optionally smoothed and rescaled to unit variance."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"noise dims must be three positive sizes, got {dims}")
    if smooth_sigma < 0:
        raise ValueError("smooth_sigma must be >= 0")
    values = np.random.default_rng(seed).standard_normal(dims)
    if smooth_sigma > 0:
        kernel = gaussian_kernel(smooth_sigma)
        for axis in range(3):
            values = smooth_axis(values, kernel, axis)
        std = values.std()
        if std > 0:
            values = values / std
    return NoiseVolume(dims, values, int(seed), float(smooth_sigma))


def chunk_noise(z3: NoiseVolume, slice_index: int, channels: int | None = None) -> Tensor:
    """The z-slice at ``slice_index``, optionally tiled to ``[channels,H,W]``."""
    if not 0 <= slice_index < z3.depth:
        raise IndexError(f"slice {slice_index} outside noise depth {z3.depth}")
    chunk = z3.values[slice_index]
    if channels is not None:
        chunk = np.broadcast_to(chunk, (channels,) + chunk.shape)
    return Tensor(chunk)


def chunk_stack(z3: NoiseVolume, start: int, count: int) -> Tensor:
    if start < 0 or start + count > z3.depth:
        raise IndexError(f"slices {start}..{start + count - 1} outside noise depth {z3.depth}")
    return Tensor(z3.values[start:start + count])


class InjectionParams(Module):
    """Pointwise noise mapping, gate bias and residual weights for one injection site."""

    def __init__(self, channels: int, height: int, width: int,
                 rng: np.random.Generator | None = None, hidden: int | None = None,
                 alpha: float = 0.1, residual_scale: float = 1.0):
        hidden = hidden or channels
        self.channels, self.height, self.width = channels, height, width
        if rng is None:
            self.f1_in = Conv2d(np.random.default_rng(0), 1, hidden, k=1, gain=0.0)
            self.f1_out = Conv2d(np.random.default_rng(0), hidden, channels, k=1, gain=0.0)
        else:
            self.f1_in = Conv2d(rng, 1, hidden, k=1)
            self.f1_out = Conv2d(rng, hidden, channels, k=1, gain=0.1)
        self.W1 = zeros_param((channels, height, width))
        self.alpha = float(alpha)
        self.residual_scale = float(residual_scale)

    def mapping(self, z: Tensor) -> Tensor:
        """``F1``: 1x1 conv, ReLU, 1x1 conv on ``[...,1,H,W]`` noise."""
        return self.f1_out(T.relu(self.f1_in(z)))


def inject(h: Tensor, z_slice: Tensor, params: InjectionParams) -> Tensor:
    """``h + z * sigmoid(F1(z) + W1) + alpha * residual_scale * z``.

    ``h`` is ``[C,H,W]`` with ``z_slice`` ``[H,W]``, or a stack ``[n,C,H,W]``
    with ``[n,H,W]``; noise is shared across channels.
    """
    if h.shape[-3:] != (params.channels, params.height, params.width):
        raise DimensionError(f"inject: features {h.shape} vs site "
                             f"{(params.channels, params.height, params.width)}")
    if z_slice.shape != h.shape[:-3] + h.shape[-2:]:
        raise DimensionError(f"inject: noise {z_slice.shape} does not align with {h.shape}")
    z = z_slice.detach() if z_slice.requires_grad else z_slice
    z = Tensor(z.data, dtype=h.dtype)
    lead = h.shape[:-3]
    z1 = T.reshape(z, lead + (1,) + h.shape[-2:])
    w1 = params.W1 if not lead else T.broadcast_to(params.W1, h.shape)
    gate = T.sigmoid(T.add(params.mapping(z1), w1))
    zc = T.broadcast_to(z1, h.shape)
    out = T.add(h, T.mul(zc, gate))
    coeff = params.alpha * params.residual_scale
    if coeff:
        out = T.add(out, T.scale(zc, coeff))
    return out
