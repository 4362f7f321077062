"""Spatial operators on ``[C,H,W]`` or ``[N,C,H,W]`` tensors."""

from __future__ import annotations

import numpy as np

from .tensor import ConfigurationError, DimensionError, Tensor, _lift

__all__ = ["conv2d", "pad2d", "avg_pool2d", "upsample_nearest", "downsample_nearest",
           "instance_norm", "conv_output_size"]


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is ``[C_out, C_in, k, k]`` with odd ``k``. A 3-D input is treated
    as a batch of one and returned without the batch axis.
    """
    x, weight = _lift(x), _lift(weight)
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {weight.shape}")
    xd = x.data[None] if squeeze else x.data
    n, c_in, h, w = xd.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise DimensionError(f"conv2d: kernel expects {c_w} input channels, got {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride, dilation >= 1 and padding >= 0 required")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"conv2d: non-positive output size {ho}x{wo}")
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias {bias.shape} for {c_out} channels")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wd = weight.data
    spans = []
    acc = np.zeros((c_out, n, ho, wo), dtype=np.result_type(xd, wd))
    for a in range(kh):
        for b in range(kw):
            rs = slice(a * dilation, a * dilation + stride * (ho - 1) + 1, stride)
            cs = slice(b * dilation, b * dilation + stride * (wo - 1) + 1, stride)
            # taps that only ever read padding contribute nothing
            if padding and not (_touches_data(rs, padding, h) and _touches_data(cs, padding, w)):
                continue
            spans.append((a, b, rs, cs))
            acc += np.tensordot(wd[:, :, a, b], xp[:, :, rs, cs], axes=([1], [1]))
    if bias is not None:
        acc += bias.data[:, None, None, None]
    out = acc.transpose(1, 0, 2, 3)

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for a, b, rs, cs in spans:
            if gx is not None:
                gx[:, :, rs, cs] += np.tensordot(g4, wd[:, :, a, b], axes=([1], [0])).transpose(0, 3, 1, 2)
            if gw is not None:
                gw[:, :, a, b] = np.tensordot(g4, xp[:, :, rs, cs], axes=([0, 2, 3], [0, 2, 3]))
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        if gx is not None and squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out[0] if squeeze else out), parents, backward, "conv2d")


def _touches_data(sl: slice, padding: int, size: int) -> bool:
    idx = range(sl.start, sl.stop, sl.step)
    return any(padding <= i < padding + size for i in idx)


def pad2d(x: Tensor, pad: int, mode: str = "constant") -> Tensor:
    """Pad the last two axes; ``mode`` is ``constant`` (zeros) or ``reflect``."""
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "constant":
        out = np.pad(x.data, width)

        def backward(g):
            return (g[..., pad:-pad, pad:-pad],)
    elif mode == "reflect":
        h, w = x.shape[-2:]
        if pad >= h or pad >= w:
            raise ConfigurationError(f"reflect pad {pad} too large for {h}x{w}")
        out = np.pad(x.data, width, mode="reflect")
        rows = np.pad(np.arange(h), pad, mode="reflect")
        cols = np.pad(np.arange(w), pad, mode="reflect")

        def backward(g):
            # scatter each padded cell back onto the source pixel it mirrors
            gr = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
            np.add.at(gr, (Ellipsis, rows, slice(None)), g)
            gx = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
            np.add.at(gx, (Ellipsis, slice(None), cols), gr)
            return (gx,)
    else:
        raise ConfigurationError(f"unknown pad mode '{mode}'")
    return Tensor._make(out, (x,), backward, f"pad_{mode}")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k``x``k`` mean pooling; trailing rows/cols that do not fill a window are dropped."""
    h, w = x.shape[-2:]
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ConfigurationError(f"avg_pool2d: {h}x{w} smaller than window {k}")
    lead = x.shape[:-2]
    xc = x.data[..., :ho * k, :wo * k]
    out = xc.reshape(lead + (ho, k, wo, k)).mean(axis=(-3, -1))

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        gx[..., :ho * k, :wo * k] = up
        return (gx,)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), backward, "upsample_nearest")


def downsample_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes of a plain array (masks, labels)."""
    h, w = arr.shape[-2:]
    ho, wo = size
    if (h, w) == (ho, wo):
        return arr
    ri = np.minimum((np.arange(ho) * h) // ho + (h // ho) // 2, h - 1)
    ci = np.minimum((np.arange(wo) * w) // wo + (w // wo) // 2, w - 1)
    return arr[..., ri[:, None], ci[None, :]]


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes.

    Composed from primitive ops so the gradient is the chain rule of the pieces.
    """
    from . import tensor as T

    axes = (-2, -1)
    mu = T.broadcast_to(T.mean(x, axes, keepdims=True), x.shape)
    centred = T.sub(x, mu)
    var = T.mean(T.mul(centred, centred), axes, keepdims=True)
    denom = T.broadcast_to(T.sqrt(T.add(var, eps)), x.shape)
    return T.div(centred, denom)
