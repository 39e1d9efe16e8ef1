"""FLD1 binary tensor files.

Layout (all little-endian)::

    b"FLD1" | u8 rank | rank x u32 extents | u8 dtype (1=f32, 2=f64) | raw row-major scalars
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from flowsr.errors import BadMagicError, FLDError, TruncatedPayloadError, UnknownDtypeError

MAGIC = b"FLD1"
MAX_RANK = 4
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

PathLike = Union[str, os.PathLike]


def encode(array) -> bytes:
    from flowsr.autodiff.tensor import Tensor

    if isinstance(array, Tensor):
        array = array.data
    array = np.asarray(array)
    if array.ndim > MAX_RANK:
        raise FLDError(f"rank {array.ndim} exceeds the FLD1 limit of {MAX_RANK}")
    code = CODE_FOR.get(array.dtype)
    if code is None:
        raise UnknownDtypeError(f"cannot store dtype {array.dtype} in FLD1")
    header = MAGIC + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4
    if len(blob) < pos + 1:
        raise TruncatedPayloadError("truncated payload: missing rank")
    (rank,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    if rank > MAX_RANK:
        raise FLDError(f"rank {rank} exceeds the FLD1 limit of {MAX_RANK}")
    if len(blob) < pos + 4 * rank + 1:
        raise TruncatedPayloadError("truncated payload: header cut short")
    shape = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    (code,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    if code not in DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    need = count * dtype.itemsize
    if len(blob) - pos < need:
        raise TruncatedPayloadError(f"truncated payload: expected {need} bytes, found {len(blob) - pos}")
    if len(blob) - pos > need:
        raise FLDError(f"{len(blob) - pos - need} trailing bytes after payload")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def atomic_write_bytes(path: PathLike, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fld_write(t, path: PathLike) -> None:
    atomic_write_bytes(path, encode(t))


def fld_read(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
