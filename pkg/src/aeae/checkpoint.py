"""Versioned binary container used for every persisted model.

Layout (all integers little-endian)::

    b"AEAE" | u16 version | u32 n | n bytes of UTF-8 JSON descriptor
    | u32 array count | per array: u8 ndim, ndim x u32 dims, raw <f8 data

Anything after the last array is treated as corruption.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"AEAE"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CorruptCheckpointError(CheckpointError):
    """File is truncated or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or format version do not match this reader."""


def pack(descriptor: dict, arrays: list[np.ndarray]) -> bytes:
    meta = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(blob: bytes) -> tuple[dict, list[np.ndarray]]:
    if len(blob) < 4:
        raise CorruptCheckpointError("truncated checkpoint: missing header")
    if blob[:4] != MAGIC:
        raise CheckpointVersionError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    r = _Reader(blob)
    r.take(4)
    version, meta_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (reader is {FORMAT_VERSION})")
    try:
        descriptor = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable descriptor: {exc}") from exc
    (count,) = r.unpack("<I")
    arrays = []
    for _ in range(count):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        arrays.append(np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64))
    if r.pos != len(blob):
        raise CorruptCheckpointError(f"{len(blob) - r.pos} trailing bytes after last array")
    return descriptor, arrays


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
