"""Flat binary checkpoints.

Layout: ``b"SOFG"``, format version (u32), then records until EOF. A record is
name length (u32), UTF-8 name, rank (u32), rank dims (u32 each) and the
payload as little-endian float64 in C order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SOFG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in records.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 8
    records = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            records[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims).copy()
            pos = end
    except struct.error:
        raise CheckpointError(f"{path}: truncated record") from None
    return records
