"""Adversarial training loop with exact checkpoint resume."""

from __future__ import annotations

import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .metrics import psnr
from .model import (Generator, MultiScaleDiscriminator, PerceptualNet, discriminator_objective,
                    generator_objective, one_hot)
from .nn import Adam
from .phantom import AUGMENT_OPS, _transform
from .spatial_noise import make_noise_volume

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_G", "gan", "feat", "vgg", "gtc", "loss_D")
TRAIN_OPS = ("identity",) + AUGMENT_OPS


class DataError(ValueError):
    """Dataset contents are inconsistent with the run configuration."""


def fit_volume(vol: np.ndarray, labels: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Resize both fields in-plane to ``size`` x ``size`` (linear for intensity, nearest for labels)."""
    d, h, w = vol.shape
    if (h, w) == (size, size):
        return vol, labels
    zoom = (1.0, size / h, size / w)
    v = np.clip(ndimage.zoom(vol, zoom, order=1), 0.0, 1.0)
    m = ndimage.zoom(labels, zoom, order=0)
    return v, m


def prepare(samples, cfg: RunConfig):
    out = []
    for name, vol, labels in samples:
        if labels.min() < 0 or labels.max() >= cfg.classes:
            raise DataError(f"{name}: labels span {labels.min()}..{labels.max()}, "
                            f"config has {cfg.classes} classes")
        if vol.shape[0] < cfg.n_slices:
            raise DataError(f"{name}: depth {vol.shape[0]} < n_slices {cfg.n_slices}")
        vol, labels = fit_volume(vol, labels, cfg.image_size)
        out.append((name, vol, labels))
    return out


class Trainer:
    def __init__(self, cfg: RunConfig, train_samples, out_dir=None):
        self.cfg = cfg
        T.set_default_dtype(np.float64 if cfg.precision == "float64" else np.float32)
        self.data = prepare(train_samples, cfg)
        if not self.data:
            raise DataError("no training samples")
        self.gcfg = cfg.generator_config()
        self.lcfg = cfg.loss_config()
        model_rng = np.random.default_rng(cfg.seed_model)
        self.G = Generator(self.gcfg, model_rng)
        self.D = MultiScaleDiscriminator(cfg.classes, self.lcfg, model_rng)
        self.pnet = PerceptualNet(cfg.perceptual_seed)
        self.opt_g = Adam(self.G.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.opt_d = Adam(self.D.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.rng_data = np.random.default_rng(cfg.seed_data)
        self.rng_noise = np.random.default_rng(cfg.seed_noise)
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[dict] = []

    @property
    def total_steps(self) -> int:
        if self.cfg.epochs:
            per_epoch = int(np.ceil(len(self.data) / self.cfg.batch_size))
            return self.cfg.epochs * per_epoch
        return self.cfg.steps

    # -- one optimisation step ---------------------------------------------
    def _sample(self):
        name, vol, labels = self.data[int(self.rng_data.integers(len(self.data)))]
        start = int(self.rng_data.integers(vol.shape[0] - self.cfg.n_slices + 1))
        op = TRAIN_OPS[int(self.rng_data.integers(len(TRAIN_OPS)))] if self.cfg.augment else "identity"
        noise_seed = int(self.rng_noise.integers(2 ** 62))
        vol, labels = _transform(vol, op), _transform(labels, op)
        z3 = make_noise_volume(vol.shape, noise_seed, self.cfg.noise_sigma) if self.cfg.use_noise else None
        return vol, labels, start, z3

    def train_step(self) -> dict:
        cfg = self.cfg
        dt = T.get_default_dtype()
        batch = [self._sample() for _ in range(cfg.batch_size)]
        inv_b = 1.0 / cfg.batch_size
        sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
        fakes = []

        self.opt_g.zero_grad()
        self.D.requires_grad_(False)
        for vol, labels, start, z3 in batch:
            n = cfg.n_slices
            masks = one_hot(labels[start:start + n], cfg.classes).astype(dt)
            real = T.Tensor(vol[start:start + n, None], dtype=dt)
            fake = self.G(masks, z3, start)
            loss, parts = generator_objective(fake, real, masks, self.D, self.pnet, self.lcfg)
            T.scale(loss, inv_b).backward()
            fakes.append((fake.detach(), real, masks))
            sums["loss_G"] += loss.item() * inv_b
            for k, v in parts.values().items():
                sums[k] += v * inv_b
        self.D.requires_grad_(True)
        self.opt_g.step()

        self.opt_d.zero_grad()
        for fake, real, masks in fakes:
            loss_d = discriminator_objective(fake, real, masks, self.D)
            T.scale(loss_d, inv_b).backward()
            sums["loss_D"] += loss_d.item() * inv_b
        self.opt_d.step()

        self.step += 1
        if not all(np.isfinite(v) for v in sums.values()):
            raise T.NumericError(f"non-finite loss at step {self.step}: {sums}")
        record = {"step": self.step, **sums}
        self.history.append(record)
        return record

    def run(self, steps: int | None = None, log_path=None, ckpt_every: int | None = None) -> list[dict]:
        target = self.total_steps if steps is None else steps
        ckpt_every = ckpt_every or self.cfg.ckpt_every
        records = []
        while self.step < target:
            rec = self.train_step()
            records.append(rec)
            if log_path is not None:
                append_log(log_path, rec)
            if self.out_dir is not None and self.step % ckpt_every == 0:
                self.save(self.out_dir / f"ckpt_{self.step:06d}.amgc")
        return records

    # -- checkpoints -------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        arrays = OrderedDict()
        for prefix, module in (("G", self.G), ("D", self.D)):
            for name, p in module.named_parameters():
                arrays[f"{prefix}.{name}"] = p.data
        for prefix, opt, module in (("optG", self.opt_g, self.G), ("optD", self.opt_d, self.D)):
            names = [n for n, _ in module.named_parameters()]
            for name, m, v in zip(names, opt.m, opt.v):
                arrays[f"{prefix}.m.{name}"] = m
                arrays[f"{prefix}.v.{name}"] = v
        meta = {
            "config": self.cfg.to_text(),
            "optG_t": self.opt_g.t,
            "optD_t": self.opt_d.t,
            "rng_data": self.rng_data.bit_generator.state,
            "rng_noise": self.rng_noise.bit_generator.state,
        }
        return Checkpoint(self.step, arrays, meta)

    def save(self, path) -> None:
        save_checkpoint(self.to_checkpoint(), path)

    def load(self, ckpt: Checkpoint) -> None:
        if RunConfig.from_text(ckpt.meta["config"]) != self.cfg:
            raise DataError("checkpoint was written with a different configuration")
        for prefix, module in (("G", self.G), ("D", self.D)):
            module.load_state_dict({n[len(prefix) + 1:]: a for n, a in ckpt.arrays.items()
                                    if n.startswith(prefix + ".")})
        for prefix, opt, module, key in (("optG", self.opt_g, self.G, "optG_t"),
                                         ("optD", self.opt_d, self.D, "optD_t")):
            names = [n for n, _ in module.named_parameters()]
            opt.load_state({"t": ckpt.meta[key],
                            "m": [ckpt.arrays[f"{prefix}.m.{n}"] for n in names],
                            "v": [ckpt.arrays[f"{prefix}.v.{n}"] for n in names]})
        self.rng_data.bit_generator.state = ckpt.meta["rng_data"]
        self.rng_noise.bit_generator.state = ckpt.meta["rng_noise"]
        self.step = ckpt.step


def generator_from_checkpoint(ckpt: Checkpoint) -> tuple[Generator, RunConfig]:
    cfg = RunConfig.from_text(ckpt.meta["config"])
    T.set_default_dtype(np.float64 if cfg.precision == "float64" else np.float32)
    gen = Generator(cfg.generator_config(), np.random.default_rng(cfg.seed_model))
    gen.load_state_dict({n[2:]: a for n, a in ckpt.arrays.items() if n.startswith("G.")})
    return gen, cfg


def load_generator(path) -> tuple[Generator, RunConfig]:
    return generator_from_checkpoint(load_checkpoint(path))


# -- inference ------------------------------------------------------------------
def window_starts(depth: int, n: int) -> list[int]:
    if depth < n:
        raise DataError(f"volume depth {depth} < generator slice count {n}")
    starts = list(range(0, depth - n + 1, n))
    if starts[-1] != depth - n:
        starts.append(depth - n)
    return starts


def generate_volume(gen: Generator, labels: np.ndarray, noise_seed: int) -> np.ndarray:
    """Synthesize a whole ``[D,H,W]`` volume in consecutive slice windows sharing one noise field."""
    cfg = gen.cfg
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise DataError(f"labels span {labels.min()}..{labels.max()}, "
                        f"generator expects {cfg.n_classes} classes")
    if labels.shape[1:] != tuple(cfg.image_size):
        raise DataError(f"mask plane {labels.shape[1:]} vs generator {cfg.image_size}")
    dt = T.get_default_dtype()
    z3 = make_noise_volume(labels.shape, noise_seed, cfg.noise_sigma) if cfg.use_noise else None
    out = np.zeros(labels.shape, dtype=np.float64)
    n = cfg.n_slices
    with T.no_grad():
        for s in window_starts(labels.shape[0], n):
            masks = one_hot(labels[s:s + n], cfg.n_classes).astype(dt)
            out[s:s + n] = gen(masks, z3, s).data[:, 0]
    return out


def mean_psnr(gen: Generator, samples, noise_seed: int = 0) -> float:
    vals = []
    for _, vol, labels in samples:
        vals.append(psnr(vol, generate_volume(gen, labels, noise_seed), 1.0))
    return float(np.mean(vals))


# -- loss log -------------------------------------------------------------------
def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def append_log(path, record: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        fh.write("\t".join(_fmt(record[c]) for c in LOG_COLUMNS) + "\n")


def read_log(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    cols = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        rows.append({c: (int(v) if c == "step" else float(v)) for c, v in zip(cols, vals)})
    return rows


def truncate_log(path, step: int) -> None:
    """Drop log rows past ``step`` so a resumed run appends cleanly."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines()
    keep = [lines[0]] + [l for l in lines[1:] if int(l.split("\t", 1)[0]) <= step]
    path.write_text("\n".join(keep) + "\n", encoding="utf-8")
