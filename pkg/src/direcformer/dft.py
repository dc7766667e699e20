"""DFT1 binary tensor files.

Layout (all little-endian)::

    b"DFT1" | u32 rank | rank x u64 extents | u8 width (4 = f32, 8 = f64) | payload

The payload is row-major IEEE-754 data of the flagged width.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"DFT1"
_WIDTHS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class DFTFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    width = arr.dtype.itemsize
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<B", width)
    return header + np.ascontiguousarray(arr, dtype=_WIDTHS[width]).tobytes()


def read_from(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise DFTFormatError(f"bad magic {magic!r}")
    raw = stream.read(4)
    if len(raw) != 4:
        raise DFTFormatError("truncated header")
    (rank,) = struct.unpack("<I", raw)
    raw = stream.read(8 * rank)
    if len(raw) != 8 * rank:
        raise DFTFormatError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    raw = stream.read(1)
    if len(raw) != 1 or raw[0] not in _WIDTHS:
        raise DFTFormatError(f"bad precision flag {raw!r}")
    dtype = _WIDTHS[raw[0]]
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DFTFormatError(f"payload truncated: expected {count} values")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def decode(buf: bytes) -> np.ndarray:
    return read_from(io.BytesIO(buf))


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            return read_from(fh)
        except DFTFormatError as exc:
            raise DFTFormatError(f"{path}: {exc}") from None
