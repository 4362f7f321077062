"""Command-line entry point: phantom | train | generate | evaluate | gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .phantom import (VolumeFormatError, generate_phantom, load_split, read_volume, write_dataset,
                      write_pgm, write_volume)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("anatomask")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D,H,W integers, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated sizes, got {text!r}")
    return dims


def _volume_dir(root: Path, sub: str) -> Path:
    """Accept either a directory of ``.amgv`` files or a split directory holding ``sub/``."""
    return root / sub if (root / sub).is_dir() else root


# -- subcommands -----------------------------------------------------------------
def cmd_phantom(args) -> int:
    if args.count < 7:
        raise UsageError(f"--count must be >= 7 for a train/val/test split, got {args.count}")
    # per-sample seeds are derived from the run seed so reruns are bit-identical
    samples = [generate_phantom(args.seed * 100003 + i, args.dims, args.classes)
               for i in range(args.count)]
    manifest = write_dataset(args.out, samples, args.seed)
    print("\t".join(f"{s}={len(ids)}" for s, ids in manifest.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import Trainer, mean_psnr, prepare, truncate_log

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    data = Path(args.data)
    train = load_split(data, "train")
    if not train:
        raise VolumeFormatError(f"{data / 'train'}: no training volumes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    trainer = Trainer(cfg, train, out_dir=out)
    log_path = out / "loss.tsv"
    if args.resume:
        trainer.load(load_checkpoint(args.resume))
        truncate_log(log_path, trainer.step)
        log.info("resumed at step %d", trainer.step)
    elif log_path.exists():
        log_path.unlink()
    trainer.run(log_path=log_path)
    trainer.save(out / "final.amgc")
    last = trainer.history[-1] if trainer.history else None
    msg = f"steps={trainer.step}"
    if last:
        msg += f"\tloss_G={last['loss_G']:.6g}\tloss_D={last['loss_D']:.6g}"
    if (data / "val").is_dir():
        val = load_split(data, "val")
        if val:
            msg += f"\tval_psnr={mean_psnr(trainer.G, prepare(val, cfg)):.4f}"
    print(msg)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .training import DataError, generate_volume, load_generator

    gen, cfg = load_generator(args.ckpt)
    mask_dir = _volume_dir(Path(args.masks), "mask")
    files = sorted(mask_dir.glob("*.amgv"))
    if not files:
        raise DataError(f"{mask_dir}: no mask volumes found")
    out = Path(args.out)
    for mp in files:
        labels = read_volume(mp).astype(np.int64)
        if labels.min() < 0 or labels.max() >= cfg.classes:
            raise DataError(f"{mp.name}: mask labels up to {labels.max()} but checkpoint "
                            f"was trained with {cfg.classes} classes")
        vol = generate_volume(gen, labels, args.noise_seed)
        write_volume(vol.astype(np.float32), out / "vol" / mp.name)
        for z, plane in enumerate(vol):
            write_pgm(plane, out / "pgm" / f"{mp.stem}_z{z:03d}.pgm")
    print(f"generated {len(files)} volumes into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_pairs
    from .training import DataError

    real_dir = _volume_dir(Path(args.real), "vol")
    fake_dir = _volume_dir(Path(args.fake), "vol")
    real = {p.name: p for p in real_dir.glob("*.amgv")}
    fake = {p.name: p for p in fake_dir.glob("*.amgv")}
    unpaired = sorted(set(real) ^ set(fake))
    if unpaired:
        raise DataError("unpaired files: " + ", ".join(unpaired))
    if not real:
        raise DataError(f"{real_dir}: no volumes to evaluate")
    names = sorted(real)
    reals = [read_volume(real[n]).astype(np.float64) for n in names]
    fakes = [read_volume(fake[n]).astype(np.float64) for n in names]
    for n, r, f in zip(names, reals, fakes):
        if r.shape != f.shape:
            raise DataError(f"{n}: real {r.shape} vs fake {f.shape}")
    report = evaluate_pairs(reals, fakes, [Path(n).stem for n in names], max_val=args.max_val)
    report.write(args.report)
    m = report.mean
    print(f"pairs={len(names)}\tpsnr_db={m['psnr_db']:.4f}\tssim={m['ssim']:.6f}\tlpips={m['lpips']:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.module, args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{r.component}\t{r.error:.3e}\t{'ok' if r.passed else 'FAIL'}")
    if failed:
        print("gradcheck failed: " + ", ".join(r.component for r in failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anatomask", description="Mask-conditioned slice-stack synthesis toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="write a labelled phantom dataset")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, required=True)
    ph.add_argument("--dims", type=_dims, default=(8, 64, 64))
    ph.add_argument("--classes", type=int, default=4)
    ph.add_argument("--seed", type=int, default=0)
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train generator and discriminator")
    tr.add_argument("--config")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume")
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    tr.set_defaults(func=cmd_train)

    ge = sub.add_parser("generate", help="synthesize volumes from mask volumes")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--masks", required=True)
    ge.add_argument("--out", required=True)
    ge.add_argument("--noise-seed", type=int, default=0)
    ge.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="PSNR / SSIM / LPIPS-lite over paired volumes")
    ev.add_argument("--real", required=True)
    ev.add_argument("--fake", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--max-val", type=float, default=1.0)
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--module", required=True, choices=("sif", "noise", "gtc", "model"))
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    prev_dtype = T.get_default_dtype()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeFormatError, CheckpointError, T.DimensionError, T.ConfigurationError,
            ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        T.set_default_dtype(prev_dtype)


if __name__ == "__main__":
    sys.exit(main())
