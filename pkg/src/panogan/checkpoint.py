"""PANOCKPT1 container: JSON metadata plus named float32 tensors.

Layout (all integers little-endian)::

    b"PANOCKPT1"
    u32 metadata length, metadata as UTF-8 JSON
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
                float32 payload, u32 CRC32 of the payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

MAGIC = b"PANOCKPT1"


def dumps_checkpoint(metadata: dict, tensors: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(_to_numpy(value), dtype="<f4", order="C")  # keeps 0-d shapes
        payload = arr.tobytes()
        encoded = name.encode()
        out += [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), payload,
                struct.pack("<I", zlib.crc32(payload))]
    return b"".join(out)


def loads_checkpoint(raw: bytes, name: str = "<bytes>") -> tuple[dict, dict]:
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{name}: not a PANOCKPT1 checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{name}: truncated checkpoint")
        values = struct.unpack_from(fmt, raw, pos)
        pos += size
        return values

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{name}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = take("<I")
    try:
        metadata = json.loads(take_bytes(meta_len))
    except ValueError:
        raise FormatError(f"{name}: corrupted checkpoint metadata") from None
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        key = take_bytes(name_len).decode()
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        payload = take_bytes(4 * int(np.prod(shape, dtype=np.int64)))
        (crc,) = take("<I")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{name}: checksum mismatch in tensor {key!r}")
        tensors[key] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(raw):
        raise FormatError(f"{name}: trailing bytes after last tensor")
    return metadata, tensors


def save_checkpoint(path, metadata: dict, tensors: dict) -> None:
    """Write atomically so an interrupted save never clobbers the last good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(metadata, tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from None
    return loads_checkpoint(raw, str(path))


def tensor_digest(tensors: dict) -> str:
    """SHA-256 over names and float32 payloads, in sorted name order."""
    h = hashlib.sha256()
    for key in sorted(tensors):
        arr = np.ascontiguousarray(_to_numpy(tensors[key]), dtype="<f4")
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _to_numpy(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value)
