"""Binary tensor container: ``O3VT`` magic, dtype code, rank, u64 dims, payload.

All integers and payload values are little-endian; payload is row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"O3VT"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_KINDS = {v: k for k, v in _CODES.items()}


class ContainerError(ValueError):
    """Malformed or truncated tensor container."""


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _KINDS:
        raise ContainerError(f"unsupported dtype {array.dtype}; expected float32, float64 or uint8")
    header = MAGIC + struct.pack("<BB", _KINDS[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise ContainerError(f"header truncated: need 6 bytes, have {len(buf)} (missing {6 - len(buf)})")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r} at byte 0, expected {MAGIC!r}")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise ContainerError(f"unknown dtype code {code} at byte 4")
    dims_end = 6 + 8 * rank
    if len(buf) < dims_end:
        raise ContainerError(f"dims truncated at byte {len(buf)}: missing {dims_end - len(buf)} bytes")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    dtype = _CODES[code]
    expected = dims_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < expected:
        raise ContainerError(f"payload truncated at byte {len(buf)}: missing {expected - len(buf)} bytes")
    if len(buf) > expected:
        raise ContainerError(f"{len(buf) - expected} trailing bytes after payload ending at byte {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(dims).copy()


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode(path.read_bytes())
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from None
