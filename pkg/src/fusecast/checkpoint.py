"""Binary checkpoint format for named parameter tensors.

Layout: an 8-byte magic, a format version, a record count, then one record
per parameter in the order given. Each record is
(name length u16, name utf-8, dtype tag u8, ndim u8, dims u32 each,
raw little-endian values). Writing the same parameters twice produces
byte-identical files.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"FCASTCK1"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, params: dict) -> None:
    """Write named arrays (or Tensors) to `path` in declaration order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            arr = np.asarray(value.data if hasattr(value, "data") else value)
            tag = _DTYPE_TAGS.get(arr.dtype)
            if tag is None:
                raise ValueError(f"checkpoint: unsupported dtype {arr.dtype} for '{name}'")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back as an ordered name -> array mapping."""
    out = OrderedDict()
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"checkpoint: bad magic in {path}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"checkpoint: unsupported format version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _TAG_DTYPES[tag]
            n_items = int(np.prod(shape)) if ndim else 1
            raw = fh.read(n_items * dtype.itemsize)
            if len(raw) != n_items * dtype.itemsize:
                raise ValueError(f"checkpoint: truncated data for '{name}'")
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return out
