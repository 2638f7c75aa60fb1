"""Binary file formats and PNG rendering.

All formats are little-endian:

* image ``DTIMG\\x01``: magic (6 bytes), u32 width, u32 height,
  f32 pixel_size_mm, then width*height f32 row-major values.
* sinogram ``DTSIN\\x01``: magic, u32 n_views, u32 n_det, f32 angles
  (one per view, radians), then f32 data row-major by view.
* measurement ``DTMES\\x01``: the sinogram layout (counts as data) followed
  by an equally sized f32 variance block.  Geometry and gain/blur travel in
  the scenario configuration, not in the file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from deskct.grid import ImageGrid

IMAGE_MAGIC = b"DTIMG\x01"
SINOGRAM_MAGIC = b"DTSIN\x01"
MEASUREMENT_MAGIC = b"DTMES\x01"


class FormatError(ValueError):
    pass


def write_image(path: str | Path, img: ImageGrid) -> None:
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<IIf", img.width, img.height, img.pixel_size))
        f.write(img.ravel().astype("<f4").tobytes())


def _read_exact(f, n_bytes: int, path, what: str) -> bytes:
    raw = f.read(n_bytes)
    if len(raw) != n_bytes:
        raise FormatError(f"{path}: truncated {what}")
    return raw


def read_image(path: str | Path) -> ImageGrid:
    with open(path, "rb") as f:
        if f.read(6) != IMAGE_MAGIC:
            raise FormatError(f"{path}: not an image file")
        width, height, pixel_size = struct.unpack("<IIf", _read_exact(f, 12, path, "header"))
        data = np.frombuffer(
            _read_exact(f, 4 * width * height, path, "image data"), dtype="<f4"
        )
    return ImageGrid(width, height, float(pixel_size), data.astype(np.float64))


def _write_sino_body(f, angles: np.ndarray, data: np.ndarray) -> None:
    n_views, n_det = data.shape
    f.write(struct.pack("<II", n_views, n_det))
    f.write(np.asarray(angles, dtype="<f4").tobytes())
    f.write(np.asarray(data, dtype="<f4").tobytes())


def _read_sino_body(f, path) -> tuple[np.ndarray, np.ndarray]:
    n_views, n_det = struct.unpack("<II", f.read(8))
    angles = np.frombuffer(f.read(4 * n_views), dtype="<f4").astype(np.float64)
    data = np.frombuffer(f.read(4 * n_views * n_det), dtype="<f4")
    if angles.size != n_views or data.size != n_views * n_det:
        raise FormatError(f"{path}: truncated sinogram data")
    return angles, data.astype(np.float64).reshape(n_views, n_det)


def write_sinogram(path: str | Path, angles: np.ndarray, data: np.ndarray) -> None:
    if len(angles) != data.shape[0]:
        raise ValueError("one angle per view required")
    with open(path, "wb") as f:
        f.write(SINOGRAM_MAGIC)
        _write_sino_body(f, angles, data)


def read_sinogram(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (angles, data)."""
    with open(path, "rb") as f:
        if f.read(6) != SINOGRAM_MAGIC:
            raise FormatError(f"{path}: not a sinogram file")
        return _read_sino_body(f, path)


def write_measurement(
    path: str | Path, angles: np.ndarray, counts: np.ndarray, variance: np.ndarray
) -> None:
    if counts.shape != variance.shape:
        raise ValueError("counts/variance shape mismatch")
    with open(path, "wb") as f:
        f.write(MEASUREMENT_MAGIC)
        _write_sino_body(f, angles, counts)
        f.write(np.asarray(variance, dtype="<f4").tobytes())


def read_measurement(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (angles, counts, variance)."""
    with open(path, "rb") as f:
        if f.read(6) != MEASUREMENT_MAGIC:
            raise FormatError(f"{path}: not a measurement file")
        angles, counts = _read_sino_body(f, path)
        variance = np.frombuffer(f.read(4 * counts.size), dtype="<f4")
        if variance.size != counts.size:
            raise FormatError(f"{path}: truncated variance block")
    return angles, counts.astype(np.float64), variance.astype(np.float64).reshape(counts.shape)


def write_png(
    path: str | Path, img: ImageGrid, window: tuple[float, float] | None = None
) -> None:
    """8-bit grayscale rendering with window/level clipping.

    Rows are flipped so +y points up on screen.  Default window is the image
    value range.
    """
    lo, hi = window if window is not None else (img.data.min(), img.data.max())
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((img.data - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray(np.flipud(scaled * 255).astype(np.uint8), mode="L").save(path)
