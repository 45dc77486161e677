"""Flat binary container of named float32 tensors.

Layout (all integers little-endian u32)::

    b"LEANET01" | count | entries...
    entry = name_len | name (UTF-8) | rank | extent * rank | float32 payload
"""
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"LEANET01"


def dumps(tensors):
    """Serialize a mapping of name -> array. Entries are written in sorted name order."""
    out = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(blob):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a LEANET01 checkpoint (bad magic)")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        result = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            result[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return result


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
