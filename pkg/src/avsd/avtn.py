"""Binary feature files: ``AVTN`` magic, u32 rank, u32 dims, float32 LE payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVTN"


class FormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + array.tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise FormatError(f"{source}: truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != end + 4 * count:
        raise FormatError(f"{source}: payload has {len(buf) - end} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(dims).copy()


def write(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes(), str(path))
