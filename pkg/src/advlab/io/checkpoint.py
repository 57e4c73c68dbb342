"""TDCP checkpoint container.

Layout (all integers little-endian)::

    b"TDCP" | version u32 | count u32 |
    count x ( name_len u16 | name utf-8 | rank u8 | extents u32 * rank | float64 payload )
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"TDCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


def _items(tensors) -> list[tuple[str, np.ndarray]]:
    pairs = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen: set[str] = set()
    for name, _ in pairs:
        if name in seen:
            raise DuplicateTensorError(f"duplicate tensor name {name!r}")
        seen.add(name)
    return pairs


def encode_checkpoint(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    pairs = _items(tensors)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(pairs))]
    for name, value in pairs:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} too large for {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointTruncatedError(f"truncated while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointVersionError("not a TDCP checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError(f"tensor name is not utf-8: {err}") from None
        if name in out:
            raise DuplicateTensorError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(path: str | os.PathLike, tensors) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing checkpoint: {p}")
    return decode_checkpoint(p.read_bytes())
