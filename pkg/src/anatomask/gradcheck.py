"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                      coords=None, rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``x`` is perturbed in place and restored, so ``f`` may either use its
    argument or close over ``x`` (a model parameter, say). ``coords`` limits
    the check to a random subset of that many flat indices.
    """
    if not x.requires_grad:
        raise ValueError("finite_diff_check: x must require grad")
    x.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    if coords is None or coords >= flat.size:
        idx = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=coords, replace=False)

    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = flat[i]
        up = float(f(x).data)
        flat[i] = orig - eps
        lo = flat[i]
        down = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("finite_diff_check: f produced a non-finite value")
        # divide by the step actually representable at this magnitude
        numeric = (up - down) / (hi - lo)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# -- per-module suites -------------------------------------------------------------
MODULE_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3
SUITE_NAMES = ("sif", "noise", "gtc", "model")


@dataclass
class CheckResult:
    component: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(lo, hi, shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Reduce ``out`` to a scalar through a fixed random projection."""
    w = Tensor(rng.standard_normal(out.shape))
    return T.tsum(T.mul(out, w))


def _sif_suite(rng):
    from .nn import Conv2d
    from .slice_fusion import (MultiScaleAggregator, SifParams, aggregate_slices, build_adjacency,
                               edge_attention, gnn_fuse_and_adjust, sif_modulate)
    n, c, h, w = 3, 8, 4, 4
    adj = build_adjacency(n, radius=2, tau=1.0)
    params = SifParams(n + 1, c, h, w, hidden_dim=4, rng=rng, init_scale=0.5)
    w_att = rng.standard_normal((c, h, w))
    yield "edge_attention/U", lambda: finite_diff_check(
        lambda u: T.tsum(T.mul(edge_attention(adj, params), Tensor(w_att))), params.U)
    yield "edge_attention/W", lambda: finite_diff_check(
        lambda p: T.tsum(T.mul(edge_attention(adj, params), Tensor(w_att))), params.W, coords=40, rng=rng)
    x = _leaf(rng, (n, c, h, w))
    proj = rng.standard_normal((n, c, h, w))
    yield "sif_modulate/x", lambda: finite_diff_check(
        lambda t: T.tsum(T.mul(sif_modulate(t, adj, params), Tensor(proj))), x)
    yield "aggregate_slices/features", lambda: finite_diff_check(
        lambda t: T.tsum(T.mul(aggregate_slices(t, adj), Tensor(proj))), x)
    msa = MultiScaleAggregator(c, rng)
    y = Tensor(rng.standard_normal((n, c, h, w)))
    yield "multi_scale_aggregate/x_enc", lambda: finite_diff_check(
        lambda t: T.tsum(T.mul(msa(t, y), Tensor(proj))), x)
    yield "multi_scale_aggregate/weights", lambda: finite_diff_check(
        lambda p: T.tsum(T.mul(msa(x, y), Tensor(proj))), msa.branches[1].weight, coords=40, rng=rng)
    final = Conv2d(rng, c, 2 * c, k=1)
    proj2 = rng.standard_normal((n, 2 * c, h, w))
    yield "gnn_fuse_and_adjust/f_mfa", lambda: finite_diff_check(
        lambda t: T.tsum(T.mul(gnn_fuse_and_adjust(t, adj, params, final), Tensor(proj2))), x)


def _noise_suite(rng):
    from .spatial_noise import InjectionParams, inject, make_noise_volume
    c, h, w = 4, 6, 6
    params = InjectionParams(c, h, w, rng=rng, alpha=0.1)
    params.W1.data = rng.standard_normal((c, h, w))
    z = Tensor(make_noise_volume((2, h, w), int(rng.integers(2 ** 31)), 1.0).values)
    x = _leaf(rng, (2, c, h, w))
    proj = Tensor(rng.standard_normal((2, c, h, w)))
    f = lambda _t: T.tsum(T.mul(inject(x, z, params), proj))
    yield "inject/h", lambda: finite_diff_check(f, x)
    yield "inject/W1", lambda: finite_diff_check(f, params.W1)
    yield "inject/f1_in", lambda: finite_diff_check(f, params.f1_in.weight)
    yield "inject/f1_out", lambda: finite_diff_check(f, params.f1_out.weight)


def _gtc_suite(rng):
    from .gray_texture import GtcConfig, gray_score, gtc_loss, texture_score
    k, h, w = 3, 8, 8
    labels = rng.integers(0, k, (h, w))
    masks = (labels[None] == np.arange(k)[:, None, None]).astype(np.float64)
    real = Tensor(rng.uniform(0.1, 0.9, (h, w)))
    fake = _leaf(rng, (h, w), 0.1, 0.9)
    lit = GtcConfig(alphas=(1.0, 0.5), betas=(1.0,), n_scales=2)
    mag = GtcConfig(alphas=(1.0, 0.5), betas=(1.0,), n_scales=2, magnitude_mode=True)
    yield "texture_score", lambda: finite_diff_check(lambda t: texture_score(t, masks, lit), fake)
    yield "texture_score/magnitude", lambda: finite_diff_check(lambda t: texture_score(t, masks, mag), fake)
    yield "gray_score", lambda: finite_diff_check(lambda t: gray_score(t, masks, lit), fake)
    yield "gtc_loss", lambda: finite_diff_check(lambda t: gtc_loss(real, t, masks, lit), fake)
    yield "gtc_loss/magnitude", lambda: finite_diff_check(lambda t: gtc_loss(real, t, masks, mag), fake)


def _model_suite(rng):
    from .gray_texture import GtcConfig
    from .model import (Generator, GeneratorConfig, LossConfig, MultiScaleDiscriminator, PerceptualNet,
                        discriminator_objective, generator_objective, one_hot)
    from .spatial_noise import make_noise_volume
    n, k = 3, 3
    gcfg = GeneratorConfig(base_channels=8, n_spade_blocks=2, image_size=(16, 16), n_slices=n,
                           n_classes=k, noise_sites=(0, 1), spade_hidden=8)
    lcfg = LossConfig(n_discriminators=2, disc_layers=2, disc_channels=8,
                      gtc=GtcConfig(w_tex=1e-3))
    gen = Generator(gcfg, rng)
    disc = MultiScaleDiscriminator(k, lcfg, rng)
    pnet = PerceptualNet(1234)
    labels = rng.integers(0, k, (n, 16, 16))
    masks = one_hot(labels, k).astype(np.float64)
    z3 = make_noise_volume((n, 16, 16), int(rng.integers(2 ** 31)), 1.0)
    real = Tensor(rng.uniform(0.05, 0.95, (n, 1, 16, 16)))

    def g_loss(_t):
        return generator_objective(gen(masks, z3), real, masks, disc, pnet, lcfg)[0]

    for name, p in gen.named_parameters():
        yield f"generator/{name}", (lambda p=p: finite_diff_check(g_loss, p, coords=3, rng=rng))
    fake = gen(masks, z3).detach()
    for name, p in disc.named_parameters():
        yield f"discriminator/{name}", (lambda p=p: finite_diff_check(
            lambda _t: discriminator_objective(fake, real, masks, disc), p, coords=3, rng=rng))


_SUITES = {"sif": (_sif_suite, MODULE_THRESHOLD), "noise": (_noise_suite, MODULE_THRESHOLD),
           "gtc": (_gtc_suite, MODULE_THRESHOLD), "model": (_model_suite, MODEL_THRESHOLD)}


def run_suite(module: str, seed: int = 0) -> list[CheckResult]:
    """Gradient checks for one module at 64-bit precision."""
    if module not in _SUITES:
        raise ValueError(f"unknown gradcheck module '{module}'")
    build, threshold = _SUITES[module]
    rng = np.random.default_rng(seed)
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        results = []
        for component, check in build(rng):
            try:
                err = float(check())
            except NumericError:
                err = float("inf")
            results.append(CheckResult(f"{module}:{component}", err, threshold))
        return results
    finally:
        T.set_default_dtype(prev)
