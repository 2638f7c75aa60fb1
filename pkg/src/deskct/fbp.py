"""Fan-beam filtered backprojection (flat equally spaced detector).

Used as the jumpstart initial estimate and as a comparison reconstruction.
Pipeline: log transform of counts, cosine weighting, Ram-Lak ramp filtering
of each view (frequency domain, zero-padded to the next power of two), then
distance-weighted backprojection.  No apodization window and no blur
deconvolution; detector coordinates are rebinned to the virtual detector at
the isocenter by pure scaling, so no interpolation happens before filtering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deskct.forward import Measurement
from deskct.geometry import FanBeamGeometry
from deskct.grid import ImageGrid

LOG_FLOOR_COUNTS = 1.0


@dataclass(frozen=True, eq=False)
class LineIntegralSinogram:
    """-log(y / flood) per bin, dimensionless."""

    values: np.ndarray  # (n_views, n_det)
    geometry: FanBeamGeometry

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.geometry.n_views, self.geometry.n_det):
            raise ValueError("sinogram shape does not match geometry")
        if not np.all(np.isfinite(values)):
            raise ValueError("line integrals contain non-finite values")
        object.__setattr__(self, "values", values)


def log_transform(m: Measurement, floor: float = LOG_FLOOR_COUNTS) -> LineIntegralSinogram:
    """Invert the exponential using the known per-bin gain as the flood field.

    Counts are clamped below at ``floor`` so zero or negative noisy counts
    map to a finite (large) line integral.  The detector blur is not
    deconvolved.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    gain = m.gain_blur.gain_vector(m.geometry.n_det)
    lines = -np.log(np.maximum(m.counts, floor) / gain[None, :])
    return LineIntegralSinogram(lines, m.geometry)


def _ramp_kernel(n_det: int, spacing: float) -> np.ndarray:
    """Band-limited ramp taps (fan-beam normalization, includes the 1/2)."""
    n = np.arange(-(n_det - 1), n_det)
    taps = np.zeros(n.size)
    taps[n == 0] = 1.0 / (8.0 * spacing**2)
    odd = n % 2 != 0
    taps[odd] = -0.5 / (np.pi * n[odd] * spacing) ** 2
    return taps


def ramp_filter(values: np.ndarray, spacing: float) -> np.ndarray:
    """Per-view linear convolution with the ramp kernel, scaled by ``spacing``."""
    n_views, n_det = values.shape
    taps = _ramp_kernel(n_det, spacing)
    size = int(2 ** np.ceil(np.log2(n_det + taps.size - 1)))
    f_taps = np.fft.rfft(taps, size)
    f_vals = np.fft.rfft(values, size, axis=1)
    conv = np.fft.irfft(f_vals * f_taps[None, :], size, axis=1)
    return conv[:, n_det - 1 : 2 * n_det - 1] * spacing


def fbp_reconstruct(sino: LineIntegralSinogram, like: ImageGrid) -> ImageGrid:
    """Filtered backprojection onto the grid described by ``like``.

    Views are assumed evenly spaced; sparse angular sampling is allowed and
    produces the expected streaks.
    """
    geom = sino.geometry
    sad, sdd = geom.sad, geom.sdd
    # Detector rebinned to the isocenter plane.
    s = geom.det_coords() * (sad / sdd)
    ds = geom.det_pixel * (sad / sdd)
    weighted = sino.values * (sad / np.sqrt(sad**2 + s**2))[None, :]
    filtered = ramp_filter(weighted, ds)

    angles = geom.angles_array
    dbeta = float(np.mean(np.diff(angles))) if geom.n_views > 1 else 2 * np.pi

    xs, ys = like.pixel_centers()
    out = np.zeros(like.shape)
    for v, theta in enumerate(angles):
        r_hat = (-np.sin(theta), np.cos(theta))
        t_hat = (np.cos(theta), np.sin(theta))
        zeta = xs * r_hat[0] + ys * r_hat[1]
        xi = xs * t_hat[0] + ys * t_hat[1]
        u_dist = sad - zeta
        s_prime = sad * xi / u_dist
        vals = np.interp(s_prime.ravel(), s, filtered[v], left=0.0, right=0.0)
        out += (sad**2 / u_dist**2) * vals.reshape(like.shape)
    return like.with_data(out * dbeta)
