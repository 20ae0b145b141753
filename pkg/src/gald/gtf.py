"""GTF binary tensor files.

Layout: ``b"GTF1"``, u32 rank, ``rank`` u32 dims, then ``prod(dims)`` f32
values in row-major order; all little-endian. Values are narrowed to f32 on
save and widened back to f64 on load.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CorruptFile

MAGIC = b"GTF1"


def encode(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    head = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CorruptFile(f"{source}: bad magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise CorruptFile(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != head + 4 * count:
        raise CorruptFile(f"{source}: expected {count} values, file size {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=head)
    return data.astype(np.float64).reshape(dims)


def save_gtf(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load_gtf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode(buf, os.fspath(path))
