"""Flat ``key=value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .gray_texture import GtcConfig
from .model import GeneratorConfig, LossConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or 'config'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    # generator
    base_channels: int = 8
    n_spade_blocks: int = 2
    image_size: int = 64
    n_slices: int = 4
    classes: int = 4
    noise_sites: tuple = (0,)
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
    # losses
    lambda_feat: float = 10.0
    lambda_vgg: float = 5.0
    lambda_gtc: float = 10.0
    n_discriminators: int = 2
    disc_layers: int = 3
    disc_channels: int = 16
    perceptual_seed: int = 1234
    # grayscale-texture branch
    gtc_epsilon: float = 1e-6
    gtc_alphas: tuple = (1.0, 1.0)
    gtc_betas: tuple = (1.0,)
    gtc_scales: int = 2
    gtc_w_tex: float = 0.001  # texture integral is a raw pixel sum; scale it to the other terms
    gtc_w_gray: float = 1.0
    gtc_magnitude_mode: bool = False
    # optimisation
    lr: float = 0.0002
    beta1: float = 0.1
    beta2: float = 0.9
    steps: int = 100
    epochs: int = 0
    batch_size: int = 1
    augment: bool = True
    ckpt_every: int = 50
    # seeds and precision
    seed_data: int = 0
    seed_model: int = 0
    seed_noise: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("steps", "batch_size", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    # -- derived module configs --------------------------------------------
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_channels=self.base_channels, n_spade_blocks=self.n_spade_blocks,
            image_size=(self.image_size, self.image_size), n_slices=self.n_slices,
            n_classes=self.classes, noise_sites=tuple(int(s) for s in self.noise_sites),
            use_sif=self.use_sif, use_noise=self.use_noise, sif_hidden=self.sif_hidden,
            sif_delta=self.sif_delta, sif_dense_budget=self.sif_dense_budget,
            adj_radius=self.adj_radius, adj_tau=self.adj_tau, noise_alpha=self.noise_alpha,
            noise_residual_scale=self.noise_residual_scale, noise_sigma=self.noise_sigma,
            spade_hidden=self.spade_hidden)

    def gtc_config(self) -> GtcConfig:
        return GtcConfig(epsilon=self.gtc_epsilon, alphas=tuple(map(float, self.gtc_alphas)),
                         betas=tuple(map(float, self.gtc_betas)), n_scales=self.gtc_scales,
                         w_tex=self.gtc_w_tex, w_gray=self.gtc_w_gray,
                         magnitude_mode=self.gtc_magnitude_mode)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_feat=self.lambda_feat, lambda_vgg=self.lambda_vgg,
                          lambda_gtc=self.lambda_gtc, n_discriminators=self.n_discriminators,
                          disc_layers=self.disc_layers, disc_channels=self.disc_channels,
                          gtc=self.gtc_config())

    # -- text form ---------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str | None = None) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno, source)
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = (value, lineno)
        return cls.from_pairs(values, source)

    @classmethod
    def from_pairs(cls, values: dict, source: str | None = None, base: "RunConfig | None" = None):
        types = {f.name: f for f in fields(cls)}
        kwargs = dataclasses.asdict(base) if base is not None else {}
        for key, item in values.items():
            value, lineno = item if isinstance(item, tuple) else (item, None)
            if key not in types:
                raise ConfigError(f"unknown key {key!r}", lineno, source)
            default = types[key].default
            try:
                kwargs[key] = _coerce(value, default)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", lineno, source) from None
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), None, source) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        values = {}
        for p in pairs:
            if "=" not in p:
                raise ConfigError(f"override {p!r} is not key=value")
            k, v = p.split("=", 1)
            values[k.strip()] = v.strip()
        return RunConfig.from_pairs(values, "--set", base=self)


def _coerce(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return text


ABLATIONS = {
    "baseline": {"use_sif": "false", "use_noise": "false", "lambda_gtc": "0"},
    "sif": {"use_sif": "true", "use_noise": "false", "lambda_gtc": "0"},
    "sif_noise": {"use_sif": "true", "use_noise": "true", "lambda_gtc": "0"},
    "full": {"use_sif": "true", "use_noise": "true"},
}
