"""Binary checkpoint format.

Layout: magic ``ACAS``, version u32, then a sequence of named tensors:
name length u16, name bytes (utf-8), rank u8, dims u32 x rank, raw
little-endian float32 data. All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import LoadError

MAGIC = b"ACAS"
VERSION = 1


def save_checkpoint(path, arrays):
    """Write named float32 arrays in a deterministic (sorted-name) order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise LoadError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 8:
        raise LoadError("truncated header", offset=len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise LoadError(f"unsupported version {version}", offset=4)
    arrays = {}
    pos = 8
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise LoadError("truncated name length", offset=pos)
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen > len(blob):
            raise LoadError("truncated name", offset=pos)
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 1 > len(blob):
            raise LoadError("truncated rank", offset=pos)
        rank = blob[pos]
        pos += 1
        if pos + 4 * rank > len(blob):
            raise LoadError("truncated dims", offset=pos)
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = 1
        for d in dims:
            count *= d
        nbytes = 4 * count
        if pos + nbytes > len(blob):
            raise LoadError(f"truncated data for tensor {name!r}", offset=pos)
        arrays[name] = np.frombuffer(blob[pos:pos + nbytes], dtype="<f4").reshape(dims).copy()
        pos += nbytes
    return arrays
