"""PSNR, SSIM and a feature-space perceptual distance, plus paired-set reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import PerceptualNet

PSNR_CAP = 99.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def mse(real, fake) -> float:
    r, f = _arr(real), _arr(fake)
    _same_shape(r, f, "mse")
    return float(np.mean((r - f) ** 2))


def psnr(real, fake, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report ``PSNR_CAP``."""
    if max_val <= 0:
        raise ValueError("max_val must be > 0")
    err = mse(real, fake)
    if err == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(max_val * max_val / err)


@dataclass(frozen=True)
class SsimConfig:
    max_val: float = 1.0
    window: str = "block"  # "block": 8x8 non-overlapping, "gaussian": 11x11 sliding
    block: int = 8
    gaussian_size: int = 11
    gaussian_sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (0.01 * self.max_val) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.max_val) ** 2


def _ssim_map(mx, my, vx, vy, cxy, cfg: SsimConfig) -> np.ndarray:
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def ssim_windows(x, y, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-window SSIM values with population statistics."""
    x, y = _arr(x), _arr(y)
    _same_shape(x, y, "ssim")
    h, w = x.shape[-2:]
    if cfg.window == "block":
        b = cfg.block
        if h < b or w < b:
            raise ValueError(f"ssim: image {h}x{w} smaller than {b}x{b} window")
        hb, wb = h // b, w // b

        def blocks(a):
            a = a[..., :hb * b, :wb * b]
            return a.reshape(a.shape[:-2] + (hb, b, wb, b)).swapaxes(-3, -2)

        xb, yb = blocks(x), blocks(y)
        mx, my = xb.mean(axis=(-2, -1)), yb.mean(axis=(-2, -1))
        dx, dy = xb - mx[..., None, None], yb - my[..., None, None]
        vx, vy = (dx * dx).mean(axis=(-2, -1)), (dy * dy).mean(axis=(-2, -1))
        cxy = (dx * dy).mean(axis=(-2, -1))
        return _ssim_map(mx, my, vx, vy, cxy, cfg)
    if cfg.window == "gaussian":
        k = cfg.gaussian_size
        if h < k or w < k:
            raise ValueError(f"ssim: image {h}x{w} smaller than {k}x{k} window")
        r = np.arange(k) - k // 2
        g = np.exp(-0.5 * (r / cfg.gaussian_sigma) ** 2)
        g /= g.sum()

        def filt(a):
            v = np.lib.stride_tricks.sliding_window_view(a, (k, k), axis=(-2, -1))
            return np.einsum("...ij,i,j->...", v, g, g)

        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx ** 2
        vy = filt(y * y) - my ** 2
        cxy = filt(x * y) - mx * my
        return _ssim_map(mx, my, vx, vy, cxy, cfg)
    raise ValueError(f"unknown ssim window '{cfg.window}'")


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    return float(np.mean(ssim_windows(x, y, cfg)))


def _unit_channels(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return f / (np.sqrt((f * f).sum(axis=-3, keepdims=True)) + eps)


def lpips_lite(x, y, net: PerceptualNet) -> float:
    """Per-layer spatial mean of squared channel-weighted differences of unit-normalised features."""
    x, y = _arr(x), _arr(y)
    _same_shape(x, y, "lpips_lite")
    if x.ndim == 2:
        x, y = x[None], y[None]
    with T.no_grad():
        fx = net.features(T.Tensor(x))
        fy = net.features(T.Tensor(y))
    total = 0.0
    for w, a, b in zip(net.channel_weights, fx, fy):
        d = _unit_channels(a.data) - _unit_channels(b.data)
        wd = d * np.asarray(w)[:, None, None]
        total += float((wd * wd).sum(axis=-3).mean())
    return total


# -- reports --------------------------------------------------------------------
@dataclass
class PairMetrics:
    id: str
    psnr_db: float
    ssim: float
    lpips: float


@dataclass
class MetricsReport:
    pairs: list[PairMetrics]
    max_val: float = 1.0
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    FIELDS = ("psnr_db", "ssim", "lpips")

    def __post_init__(self):
        if self.pairs and not self.mean:
            for f in self.FIELDS:
                vals = np.array([getattr(p, f) for p in self.pairs])
                self.mean[f] = float(vals.mean())
                self.std[f] = float(vals.std())

    def to_tsv(self) -> str:
        lines = [f"# anatomask-metrics v1 max_val={self.max_val!r}", "id\tpsnr_db\tssim\tlpips"]
        for p in self.pairs:
            lines.append(f"{p.id}\t{p.psnr_db:.6f}\t{p.ssim:.6f}\t{p.lpips:.6f}")
        for name, agg in (("mean", self.mean), ("std", self.std)):
            lines.append(f"#{name}\t" + "\t".join(f"{agg[f]:.6f}" for f in self.FIELDS))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_tsv())

    @classmethod
    def from_tsv(cls, text: str) -> "MetricsReport":
        pairs, mean, std, max_val = [], {}, {}, 1.0
        for line in text.splitlines():
            if line.startswith("# anatomask-metrics"):
                max_val = float(line.split("max_val=")[1])
            elif line.startswith("#mean") or line.startswith("#std"):
                name, *vals = line.split("\t")
                (mean if name == "#mean" else std).update(zip(cls.FIELDS, map(float, vals)))
            elif line and not line.startswith("id\t"):
                pid, *vals = line.split("\t")
                pairs.append(PairMetrics(pid, *map(float, vals)))
        return cls(pairs, max_val, mean, std)


def pair_metrics(pid: str, real, fake, net: PerceptualNet, max_val: float = 1.0,
                 ssim_cfg: SsimConfig | None = None) -> PairMetrics:
    """Metrics for one pair; volumes get PSNR over all voxels and slice-averaged SSIM/LPIPS."""
    r, f = _arr(real), _arr(fake)
    _same_shape(r, f, pid)
    cfg = ssim_cfg or SsimConfig(max_val=max_val)
    if r.ndim == 2:
        return PairMetrics(pid, psnr(r, f, max_val), ssim(r, f, cfg), lpips_lite(r, f, net))
    s = float(np.mean([ssim(a, b, cfg) for a, b in zip(r, f)]))
    lp = float(np.mean([lpips_lite(a, b, net) for a, b in zip(r, f)]))
    return PairMetrics(pid, psnr(r, f, max_val), s, lp)


def evaluate_pairs(real_set, fake_set, ids=None, net: PerceptualNet | None = None,
                   max_val: float = 1.0, ssim_cfg: SsimConfig | None = None) -> MetricsReport:
    real_set, fake_set = list(real_set), list(fake_set)
    if len(real_set) != len(fake_set):
        raise ValueError(f"{len(real_set)} real images but {len(fake_set)} fakes")
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(real_set))]
    net = net or PerceptualNet()
    pairs = [pair_metrics(i, r, f, net, max_val, ssim_cfg) for i, r, f in zip(ids, real_set, fake_set)]
    return MetricsReport(pairs, max_val)
