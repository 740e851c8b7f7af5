"""Reader and writer for the SE2T tensor file format.

Layout: the four magic bytes ``SE2T``, one unsigned byte holding the rank,
``rank`` little-endian uint32 extents, then the float32 little-endian payload
in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import DataError

MAGIC = b"SE2T"


def to_bytes(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.ndim > 255:
        raise DataError("rank above 255 cannot be encoded")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError("not an SE2T stream (bad magic)")
    rank = blob[4]
    off = 5 + 4 * rank
    shape = struct.unpack(f"<{rank}I", blob[5:off])
    count = int(np.prod(shape)) if rank else 1
    payload = blob[off:]
    if len(payload) != 4 * count:
        raise DataError(f"payload has {len(payload)} bytes, expected {4 * count} for shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return from_bytes(p.read_bytes())
