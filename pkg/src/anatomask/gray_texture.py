"""Sobel texture and masked grayscale-statistics scores, and the loss comparing them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class DegenerateInputError(ValueError):
    """Every class mask is empty."""


@dataclass(frozen=True)
class GtcConfig:
    epsilon: float = 1e-6
    alphas: tuple[float, ...] = (1.0, 1.0)
    # one exponent for all scales, or one per scale
    betas: tuple[float, ...] = (1.0,)
    n_scales: int = 2
    w_tex: float = 1.0
    w_gray: float = 1.0
    magnitude_mode: bool = False
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.n_scales < 1:
            raise ConfigurationError("n_scales must be >= 1")
        if len(self.betas) not in (1, self.n_scales):
            raise ConfigurationError("betas must have length 1 or n_scales")
        vals = (self.epsilon, *self.alphas, *self.betas, self.w_tex, self.w_gray)
        if not all(np.isfinite(vals)):
            raise ConfigurationError("G-TC weights must be finite")
        lo, hi = self.value_range
        if not hi > lo:
            raise ConfigurationError("value_range must be increasing")

    def beta(self, scale: int) -> float:
        return self.betas[0] if len(self.betas) == 1 else self.betas[scale]


@dataclass(frozen=True)
class GrayStats:
    mu: float
    sigma: float
    max: float
    min: float
    mask_sum: float
    label: int
    scale: int


def sobel_gradients(img) -> tuple[Tensor, Tensor]:
    """Horizontal and vertical Sobel responses of ``[H,W]`` (or ``[n,H,W]``) with reflect padding."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    if img.shape[-1] < 3 or img.shape[-2] < 3:
        raise ConfigurationError(f"sobel_gradients: image {img.shape} smaller than 3x3")
    padded = F.pad2d(img, 1, "reflect")
    x4 = T.reshape(padded, (-1, 1) + padded.shape[-2:])
    kernels = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None], dtype=img.dtype)
    g = F.conv2d(x4, kernels)
    gx = T.reshape(g[:, 0], img.shape)
    gy = T.reshape(g[:, 1], img.shape)
    return gx, gy


def gradient_magnitude(img) -> Tensor:
    gx, gy = sobel_gradients(img)
    return T.sqrt(T.add(T.mul(gx, gx), T.mul(gy, gy)))


def _check(img: Tensor, masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks.data if isinstance(masks, Tensor) else masks, dtype=img.dtype)
    if masks.ndim != 3 or masks.shape[1:] != img.shape:
        raise DimensionError(f"masks {masks.shape} do not match image {img.shape}")
    if not masks.any():
        raise DegenerateInputError("every class mask is empty")
    return masks


def texture_score(img, masks, cfg: GtcConfig = GtcConfig()) -> Tensor:
    """Sum over exponents ``alpha_k`` of the class-summed masked Sobel integrand."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    masks = _check(img, masks)
    gx, gy = sobel_gradients(img)
    if cfg.magnitude_mode:
        integrand = T.sqrt(T.add(T.add(T.mul(gx, gx), T.mul(gy, gy)), cfg.epsilon))
    else:
        integrand = T.add(T.mul(gx, gy), cfg.epsilon)
    inner = None
    for m in masks:
        if not m.any():
            continue
        term = T.tsum(T.mul(integrand, Tensor(m, dtype=img.dtype)))
        inner = term if inner is None else T.add(inner, term)
    total = None
    for a in cfg.alphas:
        part = T.signed_power(inner, a)
        total = part if total is None else T.add(total, part)
    return total


def _pyramid(img: Tensor, masks: np.ndarray, n_scales: int):
    levels = [(img, masks > 0.5)]
    for _ in range(1, n_scales):
        if min(img.shape) < 2:
            raise ConfigurationError(f"image too small for {n_scales} scales")
        img = F.avg_pool2d(img, 2)
        masks = F.avg_pool2d(Tensor(masks), 2).data
        levels.append((img, masks >= 0.5))
    return levels


def _class_stats(img: Tensor, m: np.ndarray):
    n = float(m.sum())
    mt = Tensor(m, dtype=img.dtype)
    mu = T.scale(T.tsum(T.mul(img, mt)), 1.0 / n)
    centred = T.sub(img, mu)
    var = T.scale(T.tsum(T.mul(T.mul(centred, centred), mt)), 1.0 / n)
    sigma = T.safe_sqrt(var)
    return mu, sigma, T.masked_max(img, m), T.masked_min(img, m), n


def gray_score(img, masks, cfg: GtcConfig = GtcConfig()) -> Tensor:
    """Sum over scales and non-empty classes of ``(mu*sigma*max*min / |mask|) ** beta``."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    masks = _check(img, masks)
    total = None
    for j, (im, ms) in enumerate(_pyramid(img, masks, cfg.n_scales)):
        for m in ms:
            if not m.any():
                continue
            mu, sigma, mx, mn, n = _class_stats(im, m)
            prod = T.scale(T.mul(T.mul(mu, sigma), T.mul(mx, mn)), 1.0 / n)
            term = T.signed_power(prod, cfg.beta(j))
            total = term if total is None else T.add(total, term)
    return total


def gray_stats(img, masks, cfg: GtcConfig = GtcConfig()) -> list[GrayStats]:
    img = img if isinstance(img, Tensor) else Tensor(img)
    masks = _check(img, masks)
    out = []
    with T.no_grad():
        for j, (im, ms) in enumerate(_pyramid(img, masks, cfg.n_scales)):
            for label, m in enumerate(ms):
                if m.any():
                    mu, sigma, mx, mn, n = _class_stats(im, m)
                    out.append(GrayStats(mu.item(), sigma.item(), mx.item(), mn.item(), n, label, j))
    return out


def class_score(img, masks, cfg: GtcConfig = GtcConfig()) -> Tensor:
    img = img if isinstance(img, Tensor) else Tensor(img)
    score = Tensor(0.0, dtype=img.dtype)
    if cfg.w_tex:
        score = T.add(score, T.scale(texture_score(img, masks, cfg), cfg.w_tex))
    if cfg.w_gray:
        score = T.add(score, T.scale(gray_score(img, masks, cfg), cfg.w_gray))
    return score


def normalise(img: Tensor, cfg: GtcConfig) -> Tensor:
    lo, hi = cfg.value_range
    if (lo, hi) == (0.0, 1.0):
        return img
    return T.scale(T.sub(img, lo), 1.0 / (hi - lo))


def gtc_loss(real_img, fake_img, masks, cfg: GtcConfig = GtcConfig()) -> Tensor:
    """Absolute difference of class scores; stacks ``[n,H,W]`` average per-slice losses."""
    real = real_img if isinstance(real_img, Tensor) else Tensor(real_img)
    fake = fake_img if isinstance(fake_img, Tensor) else Tensor(fake_img)
    if real.shape != fake.shape:
        raise DimensionError(f"gtc_loss: {real.shape} vs {fake.shape}")
    masks = np.asarray(masks.data if isinstance(masks, Tensor) else masks)
    if real.ndim == 2:
        s_real = class_score(normalise(real, cfg), masks, cfg)
        s_fake = class_score(normalise(fake, cfg), masks, cfg)
        return T.absolute(T.sub(s_real, s_fake))
    losses = [gtc_loss(real[i], fake[i], masks[i], cfg) for i in range(real.shape[0])]
    return T.scale(T.tsum(T.stack(losses)), 1.0 / len(losses))
