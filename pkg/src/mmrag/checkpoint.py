"""Bit-exact binary checkpoint format for named parameter tensors.

Layout: magic "MRGK", format version (u32 LE), tensor count (u32 LE), then
per tensor: name (u16 LE length + UTF-8), rank (u8), extents (u32 LE each),
values (float32 LE, row-major). Values are always stored as float32 even if
the in-memory model runs in float64 verification mode.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .util import sha256_bytes

MAGIC = b"MRGK"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or unsupported checkpoint data."""


def serialize_params(params: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        arr = np.ascontiguousarray(t.data, dtype=np.float32)
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def deserialize_params(blob: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(blob)

    def read(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointError("truncated checkpoint")
        return chunk

    if read(4) != MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint file")
    (version,) = struct.unpack("<I", read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        shape = tuple(struct.unpack("<I", read(4))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape)
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float32)
    if buf.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_params(params: dict[str, Tensor], path: str | Path) -> None:
    Path(path).write_bytes(serialize_params(params))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return deserialize_params(Path(path).read_bytes())


def params_fingerprint(params: dict[str, Tensor]) -> bytes:
    """32-byte digest of the serialized parameters."""
    return sha256_bytes(serialize_params(params))
