"""IDX container I/O, bit-exact.

Layout: 4-byte big-endian magic (0x00000803 for image tensors, 0x00000801
for label vectors), one big-endian u32 per dimension, then the unsigned-byte
payload. Files ending in .gz are read/written through gzip transparently.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedPayloadError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(f"truncated payload: expected {n} bytes of {what}, got {len(data)}")
    return data


def read_idx_images(path) -> np.ndarray:
    """Raw (Z, H, W) uint8 image tensor from an IDX file."""
    with _open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IMAGE_MAGIC:
            raise BadMagicError(f"wrong magic for image file: 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "dimensions"))
        payload = _read_exact(f, count * rows * cols, "pixels")
        if f.read(1):
            raise TruncatedPayloadError("trailing bytes after declared pixel payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    """Raw (Z,) uint8 label vector from an IDX file."""
    with _open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != LABEL_MAGIC:
            raise BadMagicError(f"wrong magic for label file: 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
        (count,) = struct.unpack(">I", _read_exact(f, 4, "count"))
        payload = _read_exact(f, count, "labels")
        if f.read(1):
            raise TruncatedPayloadError("trailing bytes after declared label payload")
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(path, images: np.ndarray) -> None:
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError(f"expected (Z, H, W) uint8, got {images.dtype} {images.shape}")
    with _open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(np.ascontiguousarray(images).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    if labels.dtype != np.uint8 or labels.ndim != 1:
        raise ValueError(f"expected (Z,) uint8, got {labels.dtype} {labels.shape}")
    with _open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(np.ascontiguousarray(labels).tobytes())


def check_counts(images: np.ndarray, labels: np.ndarray) -> None:
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
