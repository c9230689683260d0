"""Versioned binary checkpoint container shared by the codec and the prior.

Layout (little-endian): b"POVTCKPT" | u32 version | u32 config length |
config JSON | u32 tensor count | per tensor: u32 name length, name, u32 ndim,
u32 dims..., float64 payload.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"POVTCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def dumps(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cb = json.dumps(config, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cb)))
    buf.write(cb)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError("not a POVT checkpoint")
    version, clen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(take(clen))
    (n,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, tensors


def save(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
