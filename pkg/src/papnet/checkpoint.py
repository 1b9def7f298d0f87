"""Versioned binary container for model parameters.

Layout, all little-endian:
  8 bytes   magic (ASCII, identifies architecture + version)
  uint32    number of config integers
  uint32[]  config integers (architecture settings)
  uint32    number of tensors
  per tensor: uint32 ndim, uint32[ndim] extents, float32[] row-major data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_LEN = 8


def save_checkpoint(path, magic: str, config: list[int], tensors: list[np.ndarray]) -> None:
    if len(magic) != MAGIC_LEN:
        raise ValueError(f"magic must be exactly {MAGIC_LEN} ASCII chars, got {magic!r}")
    parts = [magic.encode("ascii")]
    parts.append(struct.pack("<I", len(config)))
    parts.append(struct.pack(f"<{len(config)}I", *config))
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        arr = np.ascontiguousarray(t, dtype="<f4")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_magic: str) -> tuple[list[int], list[np.ndarray]]:
    data = Path(path).read_bytes()
    magic = data[:MAGIC_LEN].decode("ascii", errors="replace")
    if magic != expected_magic:
        raise ValueError(f"checkpoint magic {magic!r} does not match expected {expected_magic!r}")
    off = MAGIC_LEN

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise ValueError(f"truncated checkpoint {path}")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (n_cfg,) = take("<I")
    config = list(take(f"<{n_cfg}I"))
    (n_tensors,) = take("<I")
    tensors = []
    for _ in range(n_tensors):
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * 4
        if off + nbytes > len(data):
            raise ValueError(f"truncated checkpoint {path}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors.append(arr.astype(np.float32).copy())
        off += nbytes
    if off != len(data):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return config, tensors
