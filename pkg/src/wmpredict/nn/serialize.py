"""Flat binary weight container.

Layout::

    b"CNWT1"
    u64 manifest length, manifest bytes (UTF-8, one "name<TAB>ndim" line per tensor)
    per tensor, in manifest order:
        ndim x u64 shape, then prod(shape) x float64 values

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"CNWT1"


def write_tensors(tensors: dict[str, np.ndarray], stream: BinaryIO) -> None:
    manifest = "".join(f"{name}\t{np.ndim(t)}\n" for name, t in tensors.items()).encode("utf-8")
    stream.write(MAGIC)
    stream.write(struct.pack("<Q", len(manifest)))
    stream.write(manifest)
    for t in tensors.values():
        arr = np.asarray(t, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        stream.write(arr.tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValueError("truncated weight file")
    return data


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(stream, len(MAGIC)) != MAGIC:
        raise ValueError("not a CNWT1 weight file")
    (mlen,) = struct.unpack("<Q", _read_exact(stream, 8))
    manifest = _read_exact(stream, mlen).decode("utf-8")
    out = {}
    for line in manifest.splitlines():
        name, ndim = line.rsplit("\t", 1)
        ndim = int(ndim)
        shape = struct.unpack(f"<{ndim}Q", _read_exact(stream, 8 * ndim)) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8")
        out[name] = values.astype(np.float64).reshape(shape)
    if stream.read(1):
        raise ValueError("trailing bytes after last tensor")
    return out
