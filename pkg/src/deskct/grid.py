"""2D attenuation map with physical pixel size."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Square-pixel attenuation image.

    ``data`` is (height, width) float64 in mm^-1, row-major.  Row index
    increases with +y, column index with +x, and the grid is centered on
    the rotation axis: pixel (i, j) has its center at

        x = (j - (width - 1) / 2) * pixel_size
        y = (i - (height - 1) / 2) * pixel_size
    """

    width: int
    height: int
    pixel_size: float  # mm
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != self.width * self.height:
            raise ValueError(
                f"data has {arr.size} values, expected {self.width * self.height}"
            )
        arr = arr.reshape(self.height, self.width)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, width: int, height: int, pixel_size: float) -> "ImageGrid":
        return cls(width, height, pixel_size, np.zeros((height, width)))

    @classmethod
    def from_array(cls, arr: np.ndarray, pixel_size: float) -> "ImageGrid":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("expected a 2D array")
        return cls(arr.shape[1], arr.shape[0], pixel_size, arr)

    def with_data(self, arr: np.ndarray) -> "ImageGrid":
        """Same grid metadata, new pixel values."""
        return ImageGrid(self.width, self.height, self.pixel_size, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def ravel(self) -> np.ndarray:
        """Row-major flat view of the pixel values."""
        return self.data.reshape(-1)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) center coordinates in mm, each shaped (height, width)."""
        xs = (np.arange(self.width) - (self.width - 1) / 2.0) * self.pixel_size
        ys = (np.arange(self.height) - (self.height - 1) / 2.0) * self.pixel_size
        return np.meshgrid(xs, ys)

    def congruent(self, other: "ImageGrid") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.pixel_size == other.pixel_size
        )
