"""Binary tensor dump format shared by checkpoints and reports.

Layout (little-endian): magic ``FTNS``, version u32, dtype code u8
(0 = float32, 1 = float64), rank u8, one u64 per dimension, then the raw
row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FTNS"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """The byte stream is not a valid tensor dump."""


def dump_tensor(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr)
    dt = a.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if a.ndim < 1 or a.ndim > 255:
        raise TensorFormatError(f"unsupported rank {a.ndim}")
    header = MAGIC + struct.pack("<IBB", VERSION, _DTYPE_CODES[dt], a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + dims + a.astype(dt, copy=False).tobytes(order="C")


def load_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise TensorFormatError("bad magic; not a tensor dump")
    if len(data) < 10:
        raise TensorFormatError("truncated header")
    version, code, rank = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    offset = 10
    if len(data) < offset + 8 * rank:
        raise TensorFormatError("truncated dims")
    shape = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise TensorFormatError(f"payload size mismatch: got {len(data)}, want {expected}")
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return flat.reshape(shape).copy()


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dump_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return load_tensor(Path(path).read_bytes())
