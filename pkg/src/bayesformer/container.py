"""Flat named-tensor container: little-endian binary with a JSON meta block.

Layout: magic "BFTC", u8 version, u32 entry count; per entry a u16-length
UTF-8 name, u8 ndim, u32 dims, then raw little-endian float64 data. A u32
length-prefixed JSON blob (family tags, config hashes, ...) closes the file.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .data import FormatError

MAGIC = b"BFTC"
VERSION = 1


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f8").tobytes())
        blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_container(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad container magic {magic!r} at offset 0")
        version, count = struct.unpack("<BI", f.read(5))
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise FormatError(f"truncated tensor data for {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8")) if meta_len else {}
    return arrays, meta
