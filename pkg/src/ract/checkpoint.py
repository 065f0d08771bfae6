"""Binary checkpoint container.

Layout (all integers little-endian int64)::

    b"RACTCKPT"  version
    n_pairs   then n_pairs x (key, value)     # length-prefixed UTF-8 strings
    n_tensors then n_tensors x (name, rows, cols, rows*cols float64)

A 1-D tensor of length n is written with ``rows = n, cols = 0``.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RACTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<q", len(raw)))
    buf.write(raw)


def write_checkpoint(path, meta, tensors):
    """Serialize ``meta`` (str -> str) and ``tensors`` (str -> array) to ``path``.

    Keys are written in sorted order so equal contents give equal bytes.
    The file is written to a temporary name and renamed into place.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<q", VERSION))
    buf.write(struct.pack("<q", len(meta)))
    for key in sorted(meta):
        _write_str(buf, key)
        _write_str(buf, str(meta[key]))
    buf.write(struct.pack("<q", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        if arr.ndim == 1:
            rows, cols = arr.shape[0], 0
        elif arr.ndim == 2:
            rows, cols = arr.shape
        else:
            raise CheckpointError(f"tensor {name!r} must be 1-D or 2-D")
        _write_str(buf, name)
        buf.write(struct.pack("<qq", rows, cols))
        buf.write(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n):
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path} is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def int(self):
        return struct.unpack("<q", self.take(8))[0]

    def str(self):
        return self.take(self.int()).decode("utf-8")


def read_checkpoint(path):
    """Return ``(meta, tensors)``; raises :class:`CheckpointError` on any defect."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.int()
    if version != VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {VERSION}")
    try:
        meta = {}
        for _ in range(r.int()):
            key = r.str()
            meta[key] = r.str()
        tensors = {}
        for _ in range(r.int()):
            name = r.str()
            rows, cols = struct.unpack("<qq", r.take(16))
            count = rows * max(cols, 1)
            arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
            tensors[name] = arr if cols == 0 else arr.reshape(rows, cols)
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path} is corrupt: {exc}") from exc
    if r.pos != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - r.pos} trailing bytes")
    return meta, tensors
