"""Slice-graph feature fusion.

Consecutive slices of a stack are graph nodes, plus one global node wired to
all of them. The vectorised adjacency is projected through a two-layer map to
a sigmoid attention volume that gates the feature maps; features are mixed
across slices with the row-normalised adjacency before the gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .nn import Conv2d, Module, Parameter, zeros_param
from .tensor import ConfigurationError, DimensionError, Tensor, get_default_dtype

ACTIVATIONS = {
    "relu": T.relu,
    "identity": lambda t: t,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
}

DILATION_RATES = (2, 4, 8)
CHANNEL_DIVISORS = (2, 4, 8)


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Weighted slice graph; node ``n_nodes - 1`` is the global node."""

    n_nodes: int
    weights: np.ndarray

    @property
    def n_slices(self) -> int:
        return self.n_nodes - 1

    def vec(self) -> np.ndarray:
        return self.weights.reshape(-1)

    def mixing_matrix(self) -> np.ndarray:
        return self.weights / self.weights.sum(axis=1, keepdims=True)

    def permuted(self, perm) -> "AdjacencyMatrix":
        """Relabel slice nodes by ``perm``; the global node stays last."""
        order = np.concatenate([np.asarray(perm), [self.n_nodes - 1]])
        return AdjacencyMatrix(self.n_nodes, self.weights[np.ix_(order, order)])


def build_adjacency(n_slices: int, radius: int = 2, tau: float = 1.0) -> AdjacencyMatrix:
    if n_slices < 1:
        raise ValueError("build_adjacency: need at least one slice")
    if radius < 1 or tau <= 0:
        raise ConfigurationError("build_adjacency: radius >= 1 and tau > 0 required")
    n = n_slices + 1
    idx = np.arange(n_slices)
    dist = np.abs(idx[:, None] - idx[None, :])
    a = np.zeros((n, n))
    a[:n_slices, :n_slices] = np.where(dist <= radius, np.exp(-dist / tau), 0.0)
    a[n_slices, :n_slices] = a[:n_slices, n_slices] = 1.0 / n_slices
    np.fill_diagonal(a, 1.0)
    return AdjacencyMatrix(n, a)


def identity_adjacency(n_slices: int) -> AdjacencyMatrix:
    return AdjacencyMatrix(n_slices + 1, np.eye(n_slices + 1))


class SifParams(Module):
    """Learnable maps of the edge-attention gate.

    ``W``/``c`` are dense over every ``(channel, row, col)`` position unless
    that exceeds ``dense_budget`` elements, in which case each channel shares
    one row of ``W`` and one entry of ``c`` across its spatial positions.
    """

    def __init__(self, n_nodes: int, channels: int, height: int, width: int,
                 hidden_dim: int = 8, delta: str = "relu", dense_budget: int = 1 << 18,
                 rng: np.random.Generator | None = None, init_scale: float = 0.1):
        if hidden_dim < 1:
            raise ConfigurationError("hidden_dim must be >= 1")
        if delta not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{delta}'")
        self.n_nodes, self.channels, self.height, self.width = n_nodes, channels, height, width
        self.hidden_dim = hidden_dim
        self.delta = delta
        self.dense = channels * height * width * hidden_dim <= dense_budget
        rows = channels * height * width if self.dense else channels
        dt = get_default_dtype()
        if rng is None:
            self.U = zeros_param((hidden_dim, n_nodes * n_nodes))
            self.W = zeros_param((rows, hidden_dim))
        else:
            self.U = Parameter(rng.normal(0, init_scale, (hidden_dim, n_nodes * n_nodes)).astype(dt))
            self.W = Parameter(rng.normal(0, init_scale, (rows, hidden_dim)).astype(dt))
        self.b = zeros_param((hidden_dim,))
        self.c = zeros_param((rows,))

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


def edge_attention(adj: AdjacencyMatrix, params: SifParams) -> Tensor:
    """Attention volume ``[C,H,W]`` with every entry in (0, 1)."""
    if adj.n_nodes != params.n_nodes:
        raise ConfigurationError(
            f"adjacency has {adj.n_nodes} nodes, params expect {params.n_nodes}")
    v = Tensor(adj.vec(), dtype=params.U.dtype)
    hidden = ACTIVATIONS[params.delta](T.linear(v, params.U, params.b))
    logits = T.linear(hidden, params.W, params.c)
    # saturated logits round to exactly 0 or 1; keep the gate strictly open
    tiny = float(np.finfo(logits.dtype).eps)
    att = T.clip(T.sigmoid(logits), tiny, 1.0 - tiny)
    c, h, w = params.feature_shape
    if params.dense:
        return T.reshape(att, (c, h, w))
    return T.broadcast_to(T.reshape(att, (c, 1, 1)), (c, h, w))


def sif_modulate(x: Tensor, adj: AdjacencyMatrix, params: SifParams,
                 attention: Tensor | None = None) -> Tensor:
    """Gate ``x`` (``[C,H,W]`` or a stack ``[n,C,H,W]``) by the edge attention."""
    if x.shape[-3:] != params.feature_shape:
        raise DimensionError(f"sif_modulate: features {x.shape} vs params {params.feature_shape}")
    att = edge_attention(adj, params) if attention is None else attention
    if x.ndim == 4:
        att = T.broadcast_to(att, x.shape)
    return T.mul(x, att)


class MultiScaleAggregator(Module):
    """Dense dilated-convolution cascade over ``encoder + decoder`` features."""

    def __init__(self, channels: int, rng: np.random.Generator):
        if channels % 8:
            raise ConfigurationError(f"channels must be divisible by 8, got {channels}")
        self.channels = channels
        self.branches = []
        c_in = channels
        for rate, div in zip(DILATION_RATES, CHANNEL_DIVISORS):
            self.branches.append(Conv2d(rng, c_in, channels // div, k=3, dilation=rate))
            c_in += channels // div
        self.out = Conv2d(rng, c_in, channels, k=3)

    def intermediate_channels(self) -> list[int]:
        c = self.channels
        counts = []
        for div in CHANNEL_DIVISORS:
            c += self.channels // div
            counts.append(c)
        return counts

    def __call__(self, x_enc: Tensor, y_dec: Tensor, return_intermediates: bool = False):
        if x_enc.shape != y_dec.shape:
            raise DimensionError(f"encoder {x_enc.shape} vs decoder {y_dec.shape}")
        axis = x_enc.ndim - 3
        feats = T.add(x_enc, y_dec)
        inter = []
        for conv in self.branches:
            feats = T.concat([feats, T.relu(conv(feats))], axis=axis)
            inter.append(feats)
        out = self.out(feats)
        return (out, inter) if return_intermediates else out


def multi_scale_aggregate(x_enc: Tensor, y_dec: Tensor, module: MultiScaleAggregator) -> Tensor:
    return module(x_enc, y_dec)


def aggregate_slices(features: Tensor, adj: AdjacencyMatrix) -> Tensor:
    """One round of row-normalised neighbour mixing over ``[n,C,H,W]`` slice features.

    The global node carries the mean of all slice features.
    """
    n = features.shape[0]
    if adj.n_slices != n:
        raise DimensionError(f"{n} slices but adjacency built for {adj.n_slices}")
    flat = T.reshape(features, (n, -1))
    nodes = T.concat([flat, T.mean(flat, axis=0, keepdims=True)], axis=0)
    mix = Tensor(adj.mixing_matrix()[:n], dtype=features.dtype)
    return T.reshape(T.matmul(mix, nodes), features.shape)


class SliceFusion(Module):
    """Multi-scale aggregation, graph mixing, gating and the final 1x1 expansion to 2C."""

    def __init__(self, n_slices: int, channels: int, height: int, width: int,
                 rng: np.random.Generator, hidden_dim: int = 8, delta: str = "relu",
                 dense_budget: int = 1 << 18):
        self.msa = MultiScaleAggregator(channels, rng)
        self.sif = SifParams(n_slices + 1, channels, height, width, hidden_dim, delta,
                             dense_budget, rng)
        self.final = Conv2d(rng, channels, 2 * channels, k=1)

    def __call__(self, x_enc: Tensor, y_dec: Tensor, adj: AdjacencyMatrix,
                 attention: Tensor | float | None = None) -> Tensor:
        f_mfa = self.msa(x_enc, y_dec)
        return gnn_fuse_and_adjust(f_mfa, adj, self.sif, self.final, attention)


def gnn_fuse_and_adjust(f_mfa: Tensor, adj: AdjacencyMatrix, params: SifParams,
                        final_conv: Conv2d, attention: Tensor | float | None = None) -> Tensor:
    """Mix slices over the graph, gate, activate, and expand to ``2C`` channels.

    ``attention=1.0`` bypasses the gate (plain-backbone ablation).
    """
    mixed = aggregate_slices(f_mfa, adj)
    if isinstance(attention, (int, float)):
        gated = mixed if attention == 1 else T.scale(mixed, attention)
    else:
        gated = sif_modulate(mixed, adj, params, attention)
    return final_conv(ACTIVATIONS[params.delta](gated))
