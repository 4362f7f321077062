"""Procedural labelled phantom volumes, augmentation, splits and the AMGV volume format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spatial_noise import make_noise_volume

AUGMENT_OPS = ("rot90", "rot180", "rot270", "flip_h", "flip_v")
SPLITS = ("train", "val", "test")

MAGIC = b"AMGV"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
DTYPE_CODES = {1: np.dtype("<u1"), 2: np.dtype("<i4"), 3: np.dtype("<f4"), 4: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class TrailingDataError(VolumeFormatError):
    pass


class DtypeMismatchError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


@dataclass
class PhantomSample:
    volume: np.ndarray
    mask: np.ndarray
    seed: int
    n_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.volume.shape


def generate_phantom(seed: int, dims=(8, 32, 32), k_classes: int = 4) -> PhantomSample:
    """Ellipses whose centres, radii and tilt drift smoothly with z, painted over background.

    Intensity is a per-class base level plus a per-class oriented sinusoid and a
    faint smoothed-noise layer, clipped to [0, 1].
    """
    d, h, w = (int(x) for x in dims)
    if k_classes < 2:
        raise ValueError("k_classes must be >= 2")
    if d < 4 or h < 16 or w < 16:
        raise ValueError(f"dims {dims} too small to place ellipsoids (need >= (4,16,16))")
    rng = np.random.default_rng(seed)
    z = np.arange(d)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy[None].astype(float), xx[None].astype(float)

    shapes = []
    for _ in range(k_classes - 1):
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        ry, rx = rng.uniform(0.12, 0.32) * h, rng.uniform(0.12, 0.32) * w
        theta = rng.uniform(0, np.pi)
        amp, freq, phase = rng.uniform(0.0, 0.06), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)
        shapes.append((cy, cx, ry, rx, theta, amp, freq, phase))
    # large shapes first so small ones stay visible
    order = sorted(range(k_classes - 1), key=lambda i: -shapes[i][2] * shapes[i][3])

    mask = np.zeros((d, h, w), dtype=np.int32)
    for i in order:
        cy, cx, ry, rx, theta, amp, freq, phase = shapes[i]
        wave = np.sin(2 * np.pi * freq * z / d + phase)
        ccy, ccx = cy + amp * h * wave, cx + amp * w * np.cos(2 * np.pi * freq * z / d + phase)
        sy, sx = ry * (1 + 0.15 * wave), rx * (1 - 0.15 * wave)
        t = theta + 0.2 * wave
        dy, dx = yy - ccy, xx - ccx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        mask[(u / sx) ** 2 + (v / sy) ** 2 <= 1.0] = i + 1
    for i in range(k_classes - 1):
        if not (mask == i + 1).any():
            cy, cx = shapes[i][:2]
            mask[:, int(cy), int(cx)] = i + 1

    base = np.concatenate([[rng.uniform(0.05, 0.15)], rng.permutation(np.linspace(0.3, 0.9, k_classes - 1))])
    volume = base[mask]
    for c in range(k_classes):
        fy, fx, fz = rng.uniform(0.2, 1.2, size=3)
        amp = rng.uniform(0.03, 0.08)
        pattern = amp * np.sin(fy * yy + fx * xx + 0.3 * fz * z + rng.uniform(0, 2 * np.pi))
        volume = np.where(mask == c, volume + pattern, volume)
    noise = make_noise_volume((d, h, w), int(rng.integers(2 ** 31)), 1.0).values
    volume = np.clip(volume + 0.02 * noise, 0.0, 1.0)
    return PhantomSample(volume, mask, int(seed), k_classes, {"dims": (d, h, w)})


def _transform(arr: np.ndarray, op: str) -> np.ndarray:
    if op == "identity":
        return arr.copy()
    if op.startswith("rot"):
        return np.ascontiguousarray(np.rot90(arr, int(op[3:]) // 90, axes=(-2, -1)))
    if op == "flip_h":
        return np.ascontiguousarray(arr[..., ::-1])
    if op == "flip_v":
        return np.ascontiguousarray(arr[..., ::-1, :])
    raise ValueError(f"unknown augmentation '{op}'")


def augment(sample: PhantomSample, op: str) -> PhantomSample:
    """Apply the same in-plane rotation or flip to every slice of volume and mask."""
    if op not in AUGMENT_OPS and op != "identity":
        raise ValueError(f"unknown augmentation '{op}'")
    return PhantomSample(_transform(sample.volume, op), _transform(sample.mask, op),
                         sample.seed, sample.n_classes, dict(sample.meta))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(np.floor(0.70 * n + 0.5))
    n_val = int(np.floor(0.15 * n + 0.5))
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples, seed: int):
    samples = list(samples)
    if len(samples) < 7:
        raise ValueError(f"need at least 7 samples to split, got {len(samples)}")
    n_train, n_val, _ = split_sizes(len(samples))
    perm = np.random.default_rng(seed).permutation(len(samples))
    picked = [samples[i] for i in perm]
    return picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]


# -- AMGV files -----------------------------------------------------------------
def write_volume(field_: np.ndarray, path) -> None:
    arr = np.asarray(field_)
    if arr.ndim != 3:
        raise ValueError(f"volume must be 3-D, got shape {arr.shape}")
    code = _CODE_OF.get(np.dtype(arr.dtype).newbyteorder("<"))
    if code is None:
        raise DtypeMismatchError(f"unsupported dtype {arr.dtype}")
    dt = DTYPE_CODES[code]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_volume(path, expect_dtype=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, version, code, d, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}")
    if code not in DTYPE_CODES:
        raise DtypeMismatchError(f"{path}: unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    if expect_dtype is not None and np.dtype(expect_dtype).newbyteorder("<") != dt:
        raise DtypeMismatchError(f"{path}: stored {dt}, expected {np.dtype(expect_dtype)}")
    need = d * h * w * dt.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise TrailingDataError(f"{path}: {len(payload) - need} unexpected trailing bytes")
    return np.frombuffer(payload, dtype=dt).reshape(d, h, w).copy()


# -- dataset directories --------------------------------------------------------
def sample_name(index: int) -> str:
    return f"{index:04d}.amgv"


def write_dataset(root, samples: list[PhantomSample], seed: int) -> dict[str, list[int]]:
    """Write ``root/{split}/{vol,mask}/NNNN.amgv`` plus ``root/manifest.tsv``."""
    root = Path(root)
    indexed = list(enumerate(samples))
    parts = split_dataset(indexed, seed)
    manifest = {}
    lines = ["id\tsplit\tseed\tclasses\tD\tH\tW"]
    for split, part in zip(SPLITS, parts):
        ids = sorted(i for i, _ in part)
        manifest[split] = ids
        for i, s in sorted(part, key=lambda t: t[0]):
            write_volume(s.volume.astype(np.float32), root / split / "vol" / sample_name(i))
            write_volume(s.mask.astype(np.uint8), root / split / "mask" / sample_name(i))
            lines.append(f"{i:04d}\t{split}\t{s.seed}\t{s.n_classes}\t" + "\t".join(map(str, s.dims)))
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return manifest


def load_split(root, split: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``(name, volume float64, labels int)`` for every pair in ``root/split``."""
    base = Path(root) / split
    vols = sorted((base / "vol").glob("*.amgv"))
    out = []
    for vp in vols:
        mp = base / "mask" / vp.name
        if not mp.exists():
            raise FileNotFoundError(f"{vp}: no matching mask {mp}")
        vol = read_volume(vp).astype(np.float64)
        mask = read_volume(mp).astype(np.int64)
        if vol.shape != mask.shape:
            raise VolumeFormatError(f"{vp.name}: volume {vol.shape} vs mask {mask.shape}")
        out.append((vp.stem, vol, mask))
    return out


# -- slice previews -------------------------------------------------------------
def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    """Binary (P5) greymap with maxval 255; ``img`` is a [0,1] float or uint8 plane."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"pgm: expected a 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise VolumeFormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise VolumeFormatError(f"{path}: maxval {maxval} unsupported")
    payload = raw[pos + 1:]  # exactly one whitespace byte ends the header
    if len(payload) != w * h:
        raise TruncatedPayloadError(f"{path}: {len(payload)} payload bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
