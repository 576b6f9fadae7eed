"""Raw tensor blobs: little-endian float32, row-major, no header.

Shapes and offsets live in the JSON manifests that point at a blob.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np

BLOB_DTYPE = np.dtype("<f4")


def to_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()


def pack(arrays: Iterable[tuple[str, np.ndarray]]) -> tuple[bytes, list[dict]]:
    """Concatenate arrays into one blob; returns the bytes and an offset table."""
    chunks, table, offset = [], [], 0
    for name, arr in arrays:
        raw = to_bytes(arr)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), table


def read_array(blob: bytes, offset: int, shape) -> np.ndarray:
    """Slice one array out of ``blob``; raises ``EOFError`` if the blob is too short."""
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + count * BLOB_DTYPE.itemsize
    if offset < 0 or end > len(blob):
        raise EOFError(f"truncated blob: need bytes [{offset}, {end}) but blob has {len(blob)}")
    return np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float32)


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
