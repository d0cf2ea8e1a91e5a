"""LTF tensor files: b"LTF1", u32 rank, rank x u64 dims, little-endian f32 row-major payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"LTF1"


class LtfError(ValueError):
    pass


def dumps(array) -> bytes:
    if isinstance(array, Tensor):
        array = array.data
    arr = np.asarray(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise LtfError("not an LTF1 file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise LtfError("truncated LTF header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise LtfError(f"LTF payload holds {len(buf) - off} bytes, expected {4 * count} for shape {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
