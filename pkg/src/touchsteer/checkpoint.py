"""Flat binary parameter checkpoints.

Layout: magic ``TSCP``, one version byte, uint32 record count, then per
record a length-prefixed utf-8 name, uint8 ndim, uint32 dims, and the raw
little-endian float64 payload. Round-trips are bit-exact.
"""

import struct

import numpy as np

MAGIC = b"TSCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, named_arrays):
    """Write an ordered list of (name, array) records."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_params(path):
    """Read records back as an ordered list of (name, float64 array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob[4]}")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
        records.append((name, data))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return records
