"""IDX image/label files (big-endian MNIST layout)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def write_idx(images: np.ndarray, labels: np.ndarray,
              images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError(f"images {images.shape} and labels {labels.shape} "
                         "do not form a dataset")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(labels.tobytes())


def read_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (u8 images N×rows×cols, u8 labels)."""
    raw = Path(images_path).read_bytes()
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise ValueError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
    images = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols,
                           offset=16).reshape(n, rows, cols)

    raw = Path(labels_path).read_bytes()
    magic, ln = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise ValueError(f"{labels_path}: bad IDX label magic 0x{magic:08x}")
    if ln != n:
        raise ValueError(f"label count {ln} != image count {n}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=ln, offset=8)
    return images.copy(), labels.copy()
