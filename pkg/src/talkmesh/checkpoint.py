"""Flat binary checkpoint container.

Layout, all little-endian:

    magic   4 bytes  b"TMCK"
    version u32      (currently 1)
    count   u32      number of entries
    entry   repeated: key_len u32, key utf-8, ndim u32, dims u32 * ndim,
                      data float64 * prod(dims)

Keys are dotted parameter paths, e.g. ``decoder.layers.3.ssm.A_log``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"TMCK"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for key, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")  # tobytes() below emits C order
            kb = key.encode("utf-8")
            f.write(struct.pack("<I", len(kb)))
            f.write(kb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, off)
        off += 4
        key = raw[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[key] = arr.astype(np.float64)
    if off != len(raw):
        raise ContractError(f"{path}: trailing bytes after last entry")
    return out
