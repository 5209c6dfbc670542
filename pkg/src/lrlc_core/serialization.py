"""Flat binary tensor container.

Layout: magic ``b"LRLC"``, u32 version, u8 dtype code, u8 ndim, ndim u32
extents, then the little-endian scalars in row-major order. All header
integers are little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigurationError, DataFormatError, NonFiniteError

MAGIC = b"LRLC"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_PREFIX = struct.Struct("<4sIBB")

PathLike = Union[str, os.PathLike]


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise ConfigurationError(f"unsupported dtype for tensor container: {array.dtype}")
    if dtype.kind == "f" and not np.all(np.isfinite(array)):
        raise NonFiniteError("refusing to serialize a tensor with NaN or Inf entries")
    header = _PREFIX.pack(MAGIC, VERSION, code, array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + extents + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode(payload: bytes, source: object = "<bytes>") -> np.ndarray:
    if len(payload) < _PREFIX.size:
        raise DataFormatError(source, len(payload), "truncated header")
    magic, version, code, ndim = _PREFIX.unpack_from(payload, 0)
    if magic != MAGIC:
        raise DataFormatError(source, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(source, 4, f"unsupported container version {version}")
    if code not in _CODE_DTYPES:
        raise DataFormatError(source, 8, f"unknown dtype code {code}")
    offset = _PREFIX.size
    if len(payload) < offset + 4 * ndim:
        raise DataFormatError(source, len(payload), "truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", payload, offset)
    offset += 4 * ndim
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise DataFormatError(source, offset, f"expected {expected} data bytes, found {len(payload) - offset}")
    data = np.frombuffer(payload, dtype=dtype, offset=offset, count=expected // dtype.itemsize)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write ``payload`` to a temporary sibling, then rename it over ``path``."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(handle, "wb") as stream:
            stream.write(payload)
        os.replace(temp_name, target)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise
    return target


def save_tensor(path: PathLike, array: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode(array))


def load_tensor(path: PathLike) -> np.ndarray:
    target = Path(path)
    return decode(target.read_bytes(), target)

