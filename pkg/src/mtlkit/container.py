"""Binary container for named float64 tensors (checkpoints and samples).

Layout, little-endian::

    b"GBGN"  u32 version  u32 count
    repeated count times:
        u32 name_len, name bytes (utf-8), u32 rank, u32 extents[rank],
        float64 values[prod(extents)]
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import StorageError

MAGIC = b"GBGN"
VERSION = 1


def encode(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise StorageError(f"{source}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise StorageError(f"{source}: unsupported version {version}")
        pos = 12
        out = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise StorageError(f"{source}: truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise StorageError(f"{source}: truncated container ({exc})") from exc
    if pos != len(buf):
        raise StorageError(f"{source}: {len(buf) - pos} trailing bytes")
    return out


def save(path, tensors) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(tensors))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return decode(buf, str(path))
