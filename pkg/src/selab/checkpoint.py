"""GCK1 checkpoint container: named float32 tensors in a flat binary file.

Layout (all integers little-endian u32):
    magic "GCK1" | version=1 | tensor count
    per tensor: name length | UTF-8 name | rank | dims[rank] | float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write named arrays as float32. Round-trips bit-exactly for float32 input."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated header at byte {off}")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise CheckpointError(
                f"{path}: truncated payload for '{name}', "
                f"expected {nbytes} bytes, got {len(blob) - off}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        out[name] = arr.copy()
        off += nbytes
    return out
