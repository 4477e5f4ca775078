"""Binary tensor container used for checkpoints and feature banks.

Layout (all integers little-endian):
    magic  b"ACAR"
    u32    version (=1)
    u32    tensor count
per tensor:
    u16    name length, then UTF-8 name
    u8     rank
    u64*r  dims
    f64*n  row-major little-endian data

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"ACAR"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or unsupported container."""


def save_tensors(path, tensors: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]") -> None:
    names = list(tensors.keys())
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name!r}")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float64)
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out
