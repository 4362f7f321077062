"""Generator, discriminators, perceptual surrogate and the adversarial objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import tensor as T
from .gray_texture import GtcConfig, gtc_loss
from .nn import Conv2d, Module
from .slice_fusion import AdjacencyMatrix, SliceFusion, build_adjacency
from .spatial_noise import InjectionParams, NoiseVolume, inject
from .tensor import ConfigurationError, DimensionError, Tensor

LEAK = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 8
    n_spade_blocks: int = 2
    image_size: tuple[int, int] = (32, 32)
    n_slices: int = 4
    n_classes: int = 4
    # 0 = after the encoder, b >= 1 = after SPADE block b
    noise_sites: tuple[int, ...] = (0,)
    use_sif: bool = True
    use_noise: bool = True
    sif_hidden: int = 8
    sif_delta: str = "relu"
    sif_dense_budget: int = 1 << 18
    adj_radius: int = 2
    adj_tau: float = 1.0
    noise_alpha: float = 0.1
    noise_residual_scale: float = 1.0
    noise_sigma: float = 1.0
    spade_hidden: int = 16

    def __post_init__(self):
        c = self.base_channels
        if c < 8 or c % 8:
            raise ConfigurationError(f"base_channels must be a positive multiple of 8, got {c}")
        h, w = self.image_size
        if min(h, w) < 16 or h % 2 or w % 2:
            raise ConfigurationError(f"image_size must be even and >= 16, got {self.image_size}")
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 mask classes")
        if self.n_slices < 1 or self.n_spade_blocks < 1:
            raise ConfigurationError("n_slices and n_spade_blocks must be >= 1")
        bad = [s for s in self.noise_sites if not 0 <= s <= self.n_spade_blocks]
        if bad:
            raise ConfigurationError(f"noise sites {bad} outside 0..{self.n_spade_blocks}")

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.image_size[0] // 2, self.image_size[1] // 2)


@dataclass(frozen=True)
class LossConfig:
    lambda_feat: float = 10.0
    lambda_vgg: float = 5.0
    lambda_gtc: float = 10.0
    n_discriminators: int = 2
    disc_layers: int = 3
    disc_channels: int = 16
    gtc: GtcConfig = field(default_factory=GtcConfig)

    def __post_init__(self):
        if min(self.lambda_feat, self.lambda_vgg, self.lambda_gtc) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.n_discriminators < 1 or self.disc_layers < 2:
            raise ConfigurationError("need N_D >= 1 and at least 2 layers per discriminator")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``[..., H, W]`` integer labels to ``[..., K, H, W]`` float one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    eye = np.eye(n_classes)
    return np.moveaxis(eye[labels], -1, -3)


# -- generator ------------------------------------------------------------------
class SpadeBlock(Module):
    """Instance norm modulated by per-pixel scale and shift predicted from the mask."""

    def __init__(self, channels: int, n_classes: int, rng: np.random.Generator, hidden: int = 16):
        self.shared = Conv2d(rng, n_classes, hidden, k=3)
        self.gamma = Conv2d(rng, hidden, channels, k=3, gain=0.1)
        self.beta = Conv2d(rng, hidden, channels, k=3, gain=0.1)
        self.channels = channels

    def __call__(self, x: Tensor, mask_onehot) -> Tensor:
        m = mask_onehot.data if isinstance(mask_onehot, Tensor) else np.asarray(mask_onehot)
        if m.ndim != x.ndim:
            raise DimensionError(f"spade: mask {m.shape} vs features {x.shape}")
        m = Tensor(F.downsample_nearest(m, x.shape[-2:]), dtype=x.dtype)
        actv = T.relu(self.shared(m))
        gamma = self.gamma(actv)
        beta = self.beta(actv)
        normed = F.instance_norm(x)
        return T.add(T.mul(normed, T.add(gamma, 1.0)), beta)


def spade_block(features: Tensor, mask_onehot, block: SpadeBlock) -> Tensor:
    return block(features, mask_onehot)


class Generator(Module):
    """Encoder, noise injection, slice fusion and a SPADE decoder for a stack of slices."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, k = cfg.base_channels, cfg.n_classes
        h, w = cfg.feature_size
        self.enc_in = Conv2d(rng, k, c, k=3)
        self.enc_down = Conv2d(rng, c, c, k=3, stride=2)
        self.pre_dec = Conv2d(rng, c, c, k=3)
        if cfg.use_sif:
            self.fusion = SliceFusion(cfg.n_slices, c, h, w, rng, cfg.sif_hidden, cfg.sif_delta,
                                      cfg.sif_dense_budget)
        else:
            self.plain = Conv2d(rng, c, 2 * c, k=1)
        self.blocks = []
        self.convs = []
        ch = 2 * c
        for _ in range(cfg.n_spade_blocks):
            self.blocks.append(SpadeBlock(ch, k, rng, cfg.spade_hidden))
            self.convs.append(Conv2d(rng, ch, c, k=3))
            ch = c
        self.to_img = Conv2d(rng, c, 1, k=3, gain=1.0)
        self.injectors = []
        if cfg.use_noise:
            for site in cfg.noise_sites:
                ch_site, size = self._site_geometry(site)
                self.injectors.append(InjectionParams(ch_site, *size, rng=rng, alpha=cfg.noise_alpha,
                                                      residual_scale=cfg.noise_residual_scale))
        self.adjacency = build_adjacency(cfg.n_slices, cfg.adj_radius, cfg.adj_tau)

    def _site_geometry(self, site: int):
        c = self.cfg.base_channels
        if site == 0:
            return c, self.cfg.feature_size
        # block 0 runs at feature resolution, later blocks after the upsample
        ch = 2 * c if site == 1 else c
        size = self.cfg.feature_size if site == 1 else self.cfg.image_size
        return ch, size

    def _noise_at(self, noise: np.ndarray | None, site: int) -> Tensor | None:
        if noise is None:
            return None
        _, size = self._site_geometry(site)
        return Tensor(F.downsample_nearest(noise, size))

    def _maybe_inject(self, feats: Tensor, noise, site: int) -> Tensor:
        if not self.cfg.use_noise or site not in self.cfg.noise_sites:
            return feats
        z = self._noise_at(noise, site)
        if z is None:
            return feats
        params = self.injectors[self.cfg.noise_sites.index(site)]
        return inject(feats, Tensor(z.data, dtype=feats.dtype), params)

    def __call__(self, mask_stack, z3: NoiseVolume | np.ndarray | None = None, start: int = 0,
                 adj: AdjacencyMatrix | None = None, attention=None) -> Tensor:
        cfg = self.cfg
        m = mask_stack.data if isinstance(mask_stack, Tensor) else np.asarray(mask_stack)
        n = m.shape[0]
        if m.ndim != 4 or m.shape[1:] != (cfg.n_classes, *cfg.image_size):
            raise DimensionError(f"mask stack {m.shape} does not match "
                                 f"[n,{cfg.n_classes},{cfg.image_size[0]},{cfg.image_size[1]}]")
        if cfg.use_sif and n != cfg.n_slices:
            raise DimensionError(f"generator fuses {cfg.n_slices} slices, got {n}")
        noise = None
        if cfg.use_noise:
            if z3 is None:
                raise ValueError("noise-enabled generator needs a noise volume")
            vals = z3.values if isinstance(z3, NoiseVolume) else np.asarray(z3)
            if vals.shape[0] < start + n:
                raise DimensionError(f"noise depth {vals.shape[0]} < {start + n} slices")
            if vals.shape[1:] != tuple(cfg.image_size):
                raise DimensionError(f"noise plane {vals.shape[1:]} vs image {cfg.image_size}")
            noise = vals[start:start + n]

        mt = Tensor(m)
        x = T.relu(self.enc_in(mt))
        x = T.relu(self.enc_down(x))
        x = self._maybe_inject(x, noise, 0)
        y = T.relu(self.pre_dec(x))
        if cfg.use_sif:
            d = self.fusion(x, y, adj or self.adjacency, attention)
        else:
            d = self.plain(T.relu(T.add(x, y)))
        for b, (block, conv) in enumerate(zip(self.blocks, self.convs)):
            d = T.leaky_relu(block(d, m), LEAK)
            d = self._maybe_inject(d, noise, b + 1)
            if b == 0:
                d = F.upsample_nearest(d, 2)
            d = conv(d)
        return T.sigmoid(self.to_img(T.leaky_relu(d, LEAK)))


def generate(mask_stack, z3, gen: Generator, start: int = 0) -> Tensor:
    return gen(mask_stack, z3, start)


# -- discriminator --------------------------------------------------------------
class PatchDiscriminator(Module):
    def __init__(self, in_channels: int, n_layers: int, width: int, rng: np.random.Generator):
        self.layers = []
        c = in_channels
        for i in range(n_layers - 1):
            out = width * (2 ** i)
            self.layers.append(Conv2d(rng, c, out, k=3, stride=2, gain=(2 / (1 + LEAK ** 2)) ** 0.5))
            c = out
        self.head = Conv2d(rng, c, 1, k=3, gain=1.0)

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        feats = []
        for conv in self.layers:
            x = T.leaky_relu(conv(x), LEAK)
            feats.append(x)
        logits = self.head(x)
        feats.append(logits)
        return logits, feats


class MultiScaleDiscriminator(Module):
    """``N_D`` patch discriminators on successively 2x average-pooled mask-conditioned inputs."""

    def __init__(self, n_classes: int, cfg: LossConfig, rng: np.random.Generator):
        self.n_layers = cfg.disc_layers
        self.discs = [PatchDiscriminator(1 + n_classes, cfg.disc_layers, cfg.disc_channels, rng)
                      for _ in range(cfg.n_discriminators)]

    def __call__(self, img: Tensor, mask_onehot) -> list[tuple[Tensor, list[Tensor]]]:
        m = mask_onehot.data if isinstance(mask_onehot, Tensor) else np.asarray(mask_onehot)
        coarsest = min(img.shape[-2:]) // 2 ** (len(self.discs) - 1)
        if coarsest < 2 ** (self.n_layers - 1):
            raise ConfigurationError(
                f"image {img.shape[-2:]} too small for {len(self.discs)} scales of "
                f"{self.n_layers}-layer discriminators")
        x = T.concat([img, Tensor(m, dtype=img.dtype)], axis=img.ndim - 3)
        outs = []
        for i, disc in enumerate(self.discs):
            if i:
                x = F.avg_pool2d(x, 2)
            outs.append(disc(x))
        return outs


def discriminate(img: Tensor, mask_onehot, disc: MultiScaleDiscriminator):
    return disc(img, mask_onehot)


# -- perceptual surrogate -------------------------------------------------------
class PerceptualNet(Module):
    """Frozen four-layer random conv stack standing in for a pretrained feature network."""

    STRIDES = (1, 2, 1, 2)
    WIDTHS = (8, 16, 16, 32)

    def __init__(self, seed: int = 1234, layer_weights=(0.25, 0.25, 0.25, 0.25)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.convs = []
        c = 1
        for s, wdt in zip(self.STRIDES, self.WIDTHS):
            conv = Conv2d(rng, c, wdt, k=3, stride=s)
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False
            self.convs.append(conv)
            c = wdt
        self.layer_weights = tuple(float(w) for w in layer_weights)
        self.channel_weights = [np.ones(wdt) for wdt in self.WIDTHS]

    def named_parameters(self, prefix: str = ""):
        # frozen: never trained, never checkpointed
        return iter(())

    def features(self, img) -> list[Tensor]:
        x = img if isinstance(img, Tensor) else Tensor(img)
        feats = []
        for conv in self.convs:
            x = T.relu(conv(x))
            feats.append(x)
        return feats


# -- losses ---------------------------------------------------------------------
def gan_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Hinge objective: ``(generator adversarial loss, discriminator loss)``."""
    if real_logits.shape != fake_logits.shape:
        raise DimensionError(f"logit shapes {real_logits.shape} vs {fake_logits.shape}")
    loss_d = T.add(T.mean(T.relu(T.sub(1.0, real_logits))),
                   T.mean(T.relu(T.add(fake_logits, 1.0))))
    loss_g = T.neg(T.mean(fake_logits))
    return loss_g, loss_d


def feature_matching_loss(real_feats, fake_feats) -> Tensor:
    """Sum over discriminators and all but the last pyramid level of the mean L1 gap."""
    if len(real_feats) != len(fake_feats):
        raise DimensionError("feature pyramids have different discriminator counts")
    total = Tensor(0.0)
    for rf, ff in zip(real_feats, fake_feats):
        if len(rf) != len(ff):
            raise DimensionError("feature pyramids have different depths")
        for r, f in zip(rf[:-1], ff[:-1]):
            if r.shape != f.shape:
                raise DimensionError(f"feature shapes {r.shape} vs {f.shape}")
            total = T.add(total, T.mean(T.absolute(T.sub(f, r.detach()))))
    return total


def perceptual_loss(real, fake, net: PerceptualNet) -> Tensor:
    real = real if isinstance(real, Tensor) else Tensor(real)
    fake = fake if isinstance(fake, Tensor) else Tensor(fake)
    if real.shape != fake.shape:
        raise DimensionError(f"perceptual_loss: {real.shape} vs {fake.shape}")
    total = Tensor(0.0, dtype=fake.dtype)
    for w, fr, ff in zip(net.layer_weights, net.features(real), net.features(fake)):
        d = T.sub(ff, fr)
        total = T.add(total, T.scale(T.mean(T.mul(d, d)), w))
    return total


@dataclass
class LossParts:
    gan: Tensor | float = 0.0
    feat: Tensor | float = 0.0
    vgg: Tensor | float = 0.0
    gtc: Tensor | float = 0.0

    def values(self) -> dict[str, float]:
        return {k: float(v.data) if isinstance(v, Tensor) else float(v)
                for k, v in vars(self).items()}


def compose_generator_loss(parts: LossParts, cfg: LossConfig) -> Tensor:
    total = T.add(Tensor(0.0), parts.gan)
    total = T.add(total, T.scale(T.add(Tensor(0.0), parts.feat), cfg.lambda_feat / cfg.n_discriminators))
    total = T.add(total, T.scale(T.add(Tensor(0.0), parts.vgg), cfg.lambda_vgg))
    if cfg.lambda_gtc:
        total = T.add(total, T.scale(T.add(Tensor(0.0), parts.gtc), cfg.lambda_gtc))
    return total


def generator_objective(fake: Tensor, real: Tensor, masks_onehot: np.ndarray,
                        disc: MultiScaleDiscriminator, pnet: PerceptualNet,
                        cfg: LossConfig) -> tuple[Tensor, LossParts]:
    """Composite generator loss on a ``[n,1,H,W]`` fake stack against its paired real stack."""
    fake_out = disc(fake, masks_onehot)
    with T.no_grad():
        real_out = disc(real, masks_onehot)
    n_d = len(fake_out)
    adv = Tensor(0.0)
    for logits, _ in fake_out:
        adv = T.add(adv, T.neg(T.mean(logits)))
    adv = T.scale(adv, 1.0 / n_d)
    feat = feature_matching_loss([f for _, f in real_out], [f for _, f in fake_out])
    vgg = perceptual_loss(real, fake, pnet)
    parts = LossParts(adv, feat, vgg, 0.0)
    if cfg.lambda_gtc:
        parts.gtc = gtc_loss(real[:, 0], fake[:, 0], masks_onehot, cfg.gtc)
    return compose_generator_loss(parts, cfg), parts


def discriminator_objective(fake: Tensor, real: Tensor, masks_onehot: np.ndarray,
                            disc: MultiScaleDiscriminator) -> Tensor:
    fake = fake.detach()
    total = Tensor(0.0)
    for (rl, _), (fl, _) in zip(disc(real, masks_onehot), disc(fake, masks_onehot)):
        total = T.add(total, gan_losses(rl, fl)[1])
    return T.scale(total, 1.0 / len(disc.discs))
