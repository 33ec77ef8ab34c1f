"""Flat binary archive for named parameter arrays.

Byte layout (all integers little-endian, arrays row-major little-endian):

    offset  size        field
    0       4           magic ``b"DRLC"``
    4       4           format version, uint32 (currently 1)
    8       4           entry count, uint32
    then per entry:
            2           name length L, uint16
            L           name, UTF-8
            1           dtype code: 0 = float64, 1 = float32
            1           rank (number of extents)
            4 * rank    extents, uint32 each
            itemsize*n  raw values

Round-trips are bit-exact; entries keep their insertion order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["save_archive", "load_archive"]

MAGIC = b"DRLC"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_archive(path, entries: dict[str, np.ndarray | Tensor]) -> None:
    """Write name -> array mapping to `path` in the archive format above."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise ValueError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long: {name!r}")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(dtype, copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_archive(path) -> dict[str, np.ndarray]:
    """Read an archive back into an ordered name -> array mapping."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter archive (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape).copy()
        offset += n_bytes
        out[name] = arr
    return out
