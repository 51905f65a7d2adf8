"""Reader/writer for the ``.vten`` binary tensor format.

Layout: ``b"VTEN"``, u8 version (1), u8 dtype (0=f32, 1=f64), u8 ndim,
ndim little-endian u32 dims, then the little-endian row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"VTEN"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _BY_KIND:
        raise TypeError(f"only float32/float64 tensors can be written, got {arr.dtype}")
    code = _BY_KIND[arr.dtype]
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError(f"truncated header: need 7 bytes, have {len(buf)}")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte offset 0")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code} at byte offset 5")
    dims_end = 7 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError(
            f"truncated dims at byte offset {len(buf)}: missing {dims_end - len(buf)} bytes"
        )
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dt = _CODES[code]
    need = dims_end + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload at byte offset {len(buf)}: missing {need - len(buf)} bytes")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload at byte offset {need}")
    arr = np.frombuffer(buf, dtype=dt, offset=dims_end).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
