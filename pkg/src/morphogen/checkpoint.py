"""Versioned binary checkpoints: named float64 arrays plus the path registry.

Layout (all little-endian):
  magic b"MSAT", version u32,
  u64 array count, then per array:
    u32 name length, name bytes, u32 rank, u64 extents..., float64 values...
  u64 path count, then per path:
    u32 path length, u32 slots..., u32 row index
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MSAT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path: str, arrays: dict[str, np.ndarray], registry: dict[tuple, int]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            for ext in data.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(data.tobytes())
        fh.write(struct.pack("<Q", len(registry)))
        for p, row in sorted(registry.items(), key=lambda kv: kv[1]):
            fh.write(struct.pack("<I", len(p)))
            for slot in p:
                fh.write(struct.pack("<I", slot))
            fh.write(struct.pack("<I", row))


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def load(path: str) -> tuple[dict[str, np.ndarray], dict[tuple, int]]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = _read(fh, "<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_arrays,) = _read(fh, "<Q")
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = _read(fh, "<I")
            name = fh.read(name_len).decode("utf-8")
            (rank,) = _read(fh, "<I")
            shape = tuple(_read(fh, "<Q")[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError("truncated checkpoint")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        (n_paths,) = _read(fh, "<Q")
        registry = {}
        for _ in range(n_paths):
            (plen,) = _read(fh, "<I")
            slots = tuple(_read(fh, "<I")[0] for _ in range(plen))
            (row,) = _read(fh, "<I")
            registry[slots] = row
    return arrays, registry
