"""Dataset plumbing.

IDX image container parsing (bit-exact, big-endian), per-access dynamic
binarization, training-mean centering, and the synthetic blob set the
desk-scale presets train on. Intensities live in [0, 1] everywhere.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .rng import make_rng

__all__ = [
    "IDX_IMAGE_MAGIC",
    "IdxFormatError",
    "load_idx_images",
    "binarize",
    "center",
    "synthetic_blob_images",
]

IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    """Malformed IDX container; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def load_idx_images(path) -> np.ndarray:
    """Parse an IDX image file into (count, rows*cols) intensities in [0, 1].

    Layout: big-endian magic 0x00000803, then count/rows/cols as u32, then
    unsigned-byte pixels scaled by 1/255. Anything else is rejected.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError("truncated IDX header before magic", offset=len(data))
    magic = int.from_bytes(data[0:4], "big")
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"wrong magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}", offset=0
        )
    if len(data) < 16:
        raise IdxFormatError("truncated IDX header before dimensions", offset=len(data))
    count = int.from_bytes(data[4:8], "big")
    rows = int.from_bytes(data[8:12], "big")
    cols = int.from_bytes(data[12:16], "big")
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise IdxFormatError(
            f"truncated pixel payload, expected {expected} bytes", offset=len(data)
        )
    if len(data) > expected:
        raise IdxFormatError("unexpected trailing bytes after pixel payload", offset=expected)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16, count=count * rows * cols)
    return (pixels.astype(np.float64) / 255.0).reshape(count, rows * cols)


def binarize(intensities: np.ndarray, rng) -> np.ndarray:
    """Fresh Bernoulli(intensity) pixels; resampled on every data access."""
    intensities = np.asarray(intensities, dtype=np.float64)
    return (rng.random(intensities.shape) < intensities).astype(np.float64)


def center(intensities: np.ndarray, pixel_mean: np.ndarray) -> np.ndarray:
    """Subtract the training-set mean; this is what the encoder sees."""
    return np.asarray(intensities, dtype=np.float64) - np.asarray(pixel_mean, dtype=np.float64)


def synthetic_blob_images(count: int, side: int, seed: int) -> np.ndarray:
    """Deterministic soft-blob images, (count, side*side) intensities in [0, 1].

    Each image superimposes one to three Gaussian bumps with random centers,
    widths and amplitudes, clipped to [0, 1]. Fixed seed, fixed dataset.
    """
    rng = make_rng(seed)
    grid = np.linspace(0.0, 1.0, side)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.zeros((count, side, side))
    blob_counts = rng.integers(1, 4, size=count)
    for i in range(count):
        canvas = np.zeros((side, side))
        for _ in range(blob_counts[i]):
            cy, cx = rng.random(2)
            width = 0.08 + 0.17 * rng.random()
            amplitude = 0.5 + 0.5 * rng.random()
            canvas += amplitude * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width * width)
            )
        images[i] = np.clip(canvas, 0.0, 1.0)
    return images.reshape(count, side * side)
