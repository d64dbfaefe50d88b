"""Deterministic binary container for named 2D float arrays + JSON metadata.

Layout (little-endian):

    magic "PCUP"  u8 version
    u32 meta_len, meta JSON (sorted keys)
    u32 array_count
    per array: u16 name_len, name utf-8, u32 rows, u32 cols, rows*cols f8

Identical inputs always produce identical bytes (unlike zip-based formats,
which embed timestamps), so checkpoint determinism can be tested by file
comparison.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_MAGIC = b"PCUP"
_VERSION = 1


def write_arrays(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    chunks = [_MAGIC, struct.pack("<B", _VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"array {name!r} must be 1D or 2D, got shape {arr.shape}")
        name_bytes = name.encode()
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a pcup container")
    version = blob[4]
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 5
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode()
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        nbytes = rows * cols * 8
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(rows, cols)
        off += nbytes
        arrays[name] = arr.astype(np.float64)
    return meta, arrays
