"""``UFT1`` tensor blobs.

Layout: ``b"UFT1"``, u8 dtype code (0 = f32, 1 = f64), u8 rank, ``rank`` u64
little-endian extents, then the raw little-endian row-major data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mmflow.errors import ContractError, DataIOError

MAGIC = b"UFT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise ContractError(f"UFT1 supports float32/float64 only, got {arr.dtype}")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob at ``offset``; returns the array and the offset after it."""
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise DataIOError(f"bad UFT1 magic at offset {offset}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODES:
        raise DataIOError(f"unknown UFT1 dtype code {code}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _CODES[code]
    count = int(np.prod(shape)) if rank else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise DataIOError(f"truncated UFT1 blob at offset {offset}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save(path: str | Path, arr: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode(arr))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def load(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    arr, _ = decode(buf)
    return arr
