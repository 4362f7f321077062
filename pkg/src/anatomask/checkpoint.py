"""Versioned binary checkpoints.

Layout: ``<4sHQ`` header (magic ``AMGC``, version, metadata length), a UTF-8
JSON metadata block listing every array's name, dtype, shape and byte offset,
then the concatenated little-endian array payloads.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AMGC"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    step: int
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = json.dumps({"step": ckpt.step, "arrays": index, "meta": ckpt.meta},
                      sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(meta)))
        fh.write(meta)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    _, version, meta_len = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size
    if len(raw) < start + meta_len:
        raise CheckpointTruncatedError(f"{path}: metadata truncated")
    try:
        info = json.loads(raw[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    payload = memoryview(raw)[start + meta_len:]
    total = sum(a["nbytes"] for a in info["arrays"])
    if len(payload) < total:
        raise CheckpointTruncatedError(f"{path}: payload truncated ({len(payload)} of {total} bytes)")
    if len(payload) > total:
        raise CheckpointError(f"{path}: {len(payload) - total} unexpected trailing bytes")
    arrays = OrderedDict()
    for a in info["arrays"]:
        buf = payload[a["offset"]:a["offset"] + a["nbytes"]]
        arrays[a["name"]] = np.frombuffer(buf, dtype=np.dtype(a["dtype"])).reshape(a["shape"]).copy()
    return Checkpoint(int(info["step"]), arrays, info["meta"], version)
