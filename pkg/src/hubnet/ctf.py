"""CTF tensor files: the on-disk format for checkpoints and ingested features.

Layout, all little-endian:

    bytes 0..3   magic "CTF1"
    byte  4      rank as u8 (1 to 3)
    next         rank x u32 dimensions
    payload      float32 values, row-major

Values are stored as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"CTF1"
MAX_RANK = 3


def write_ctf(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise DataFormatError(f"{path}: CTF stores rank 1..{MAX_RANK}, got rank {arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload.tobytes())


def read_ctf(path: str | Path) -> np.ndarray:
    """Read a CTF file back as float32, validating structure along the way."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    if len(blob) < 5:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    rank = blob[4]
    if rank < 1 or rank > MAX_RANK:
        raise DataFormatError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    header_end = 5 + 4 * rank
    if len(blob) < header_end:
        raise DataFormatError(f"{path}: truncated dimension list")
    dims = struct.unpack(f"<{rank}I", blob[5:header_end])
    expected = int(np.prod(dims)) * 4
    body = blob[header_end:]
    if len(body) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(body)} bytes, dims {dims} need {expected}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(dims).copy()
