"""Versioned little-endian binary container for named tensors.

Byte layout (all integers little-endian, all floats IEEE 754 LE):

    offset  size   field
    0       4      magic ``b"SCT1"``
    4       4      u32 format version (currently 1)
    8       4      u32 tensor count T
    12      4      u32 metadata length M
    16      M      UTF-8 JSON metadata object
    --- then T records, each:
    +0      2      u16 name length L
    +2      L      UTF-8 tensor name
    +2+L    1      u8 dtype code (0 = float64, 1 = float32)
    +3+L    1      u8 rank R
    +4+L    4*R    u32 extents, outermost first
    ...            raw data, row-major, prod(extents) elements

Round trips are bit-exact: raw float bytes are stored untouched.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SCT1"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write named float arrays plus a JSON metadata object."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(tensors), len(meta)))
        fh.write(meta)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _CODES:
                arr = arr.astype(np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensors(path):
    """Read a container; returns (tensors dict, metadata dict).

    Truncated or mismatched files raise :class:`CheckpointError` without
    returning a partial result.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    version, count, mlen = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    try:
        metadata = json.loads(blob[off:off + mlen].decode("utf-8"))
        off += mlen
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated at tensor {name!r}")
            tensors[name] = np.frombuffer(
                blob[off:off + nbytes], dtype=dt).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt container ({exc})") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors, metadata
