"""SERF: a tiny bit-exact tensor file format.

Layout: ``b"SERF"``, u8 version (1), u8 dtype (0 = float32 LE), u8 ndim,
``ndim`` little-endian u32 dims, then the row-major payload.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"SERF"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class SerfError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f4", order="C")
    if a.ndim > 255:
        raise SerfError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, 0, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset : offset + 4] != MAGIC:
        raise SerfError("bad magic")
    if len(buf) < offset + 7:
        raise SerfError("truncated header")
    version, dtype_code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise SerfError(f"unsupported version {version}")
    if dtype_code not in DTYPES:
        raise SerfError(f"unsupported dtype code {dtype_code}")
    pos = offset + 7
    if len(buf) < pos + 4 * ndim:
        raise SerfError("truncated dims")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = DTYPES[dtype_code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise SerfError("truncated payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.copy(), pos + nbytes


def save(path: str | os.PathLike, array: np.ndarray, meta: dict | None = None) -> None:
    """Write ``array`` and, when ``meta`` is given, a ``.json`` sidecar next to it."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(array))
    os.replace(tmp, path)
    if meta is not None:
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = decode(fh.read())
    return arr


def load_meta(path: str | os.PathLike) -> dict:
    with open(f"{path}.json", encoding="utf-8") as fh:
        return json.load(fh)
