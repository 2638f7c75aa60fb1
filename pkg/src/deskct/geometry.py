"""Fan-beam system geometry and the linear operators A (projection) and B (gain+blur).

The projector uses exact Siddon ray traversal: for every source-to-detector-bin
ray the intersection lengths with all crossed pixels are computed from the
sorted parametric crossings of the pixel grid lines.  The resulting ray/pixel
weights are assembled once into a sparse matrix that is cached per
(geometry, grid) pair, so ``project`` is a matrix-vector product and
``backproject`` is the exact transpose product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from deskct.grid import ImageGrid

_EPS = 1e-12


@dataclass(frozen=True)
class FanBeamGeometry:
    """Fan-beam acquisition: point source, flat equally spaced detector.

    At view angle theta the source sits at ``sad * (-sin t, cos t)`` and the
    detector center at ``(sdd - sad) * (sin t, -cos t)``; detector bin i is
    offset by ``(i - (n_det - 1)/2) * det_pixel`` along ``(cos t, sin t)``.
    """

    sdd: float  # source-detector distance, mm
    sad: float  # source-axis distance, mm
    n_det: int
    det_pixel: float  # mm
    angles: tuple[float, ...]  # view angles, radians, strictly increasing

    def __post_init__(self):
        if not (0 < self.sad < self.sdd):
            raise ValueError("require 0 < sad < sdd")
        if self.n_det <= 0:
            raise ValueError("n_det must be positive")
        if self.det_pixel <= 0:
            raise ValueError("det_pixel must be positive")
        angles = tuple(float(a) for a in self.angles)
        if len(angles) == 0:
            raise ValueError("need at least one view angle")
        diffs = np.diff(angles)
        if len(angles) > 1 and not np.all(diffs > 0):
            raise ValueError("angles must be strictly increasing")
        if angles[-1] - angles[0] >= 2 * math.pi:
            raise ValueError("angles must stay within one rotation")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def full_rotation(
        cls, sdd: float, sad: float, n_det: int, det_pixel: float, n_views: int
    ) -> "FanBeamGeometry":
        """Evenly spaced views over [0, 2*pi)."""
        angles = tuple(2 * math.pi * k / n_views for k in range(n_views))
        return cls(sdd, sad, n_det, det_pixel, angles)

    @property
    def n_views(self) -> int:
        return len(self.angles)

    @property
    def angles_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=np.float64)

    def det_coords(self) -> np.ndarray:
        """Signed detector bin offsets from the detector center, mm."""
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_pixel

    def source_position(self, theta: float) -> np.ndarray:
        return self.sad * np.array([-math.sin(theta), math.cos(theta)])

    def detector_positions(self, theta: float) -> np.ndarray:
        """(n_det, 2) bin center positions for one view."""
        r_hat = np.array([-math.sin(theta), math.cos(theta)])
        t_hat = np.array([math.cos(theta), math.sin(theta)])
        center = -(self.sdd - self.sad) * r_hat
        return center[None, :] + self.det_coords()[:, None] * t_hat[None, :]


def _siddon_view_entries(
    src: np.ndarray,
    det: np.ndarray,
    width: int,
    height: int,
    pixel_size: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray/pixel intersection lengths for all rays of one view.

    Returns (ray_index, pixel_index, length_mm) arrays.  Rays that miss the
    grid bounding box simply contribute no entries.
    """
    n_rays = det.shape[0]
    x_lo = -width / 2.0 * pixel_size
    y_lo = -height / 2.0 * pixel_size

    d = det - src[None, :]  # (n_rays, 2)
    ray_len = np.hypot(d[:, 0], d[:, 1])

    # Entry/exit parameters of the grid bounding box along each ray.
    a_enter = np.zeros(n_rays)
    a_exit = np.ones(n_rays)
    alive = np.ones(n_rays, dtype=bool)
    for axis, lo, hi in ((0, x_lo, -x_lo), (1, y_lo, -y_lo)):
        da = d[:, axis]
        pa = src[axis]
        near_zero = np.abs(da) < _EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            a1 = (lo - pa) / da
            a2 = (hi - pa) / da
        a_min = np.minimum(a1, a2)
        a_max = np.maximum(a1, a2)
        a_enter = np.where(near_zero, a_enter, np.maximum(a_enter, a_min))
        a_exit = np.where(near_zero, a_exit, np.minimum(a_exit, a_max))
        alive &= ~(near_zero & ((pa < lo) | (pa > hi)))
    alive &= a_enter < a_exit
    if not np.any(alive):
        return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))

    # Parametric crossings with every grid line, clipped to [enter, exit]:
    # crossings outside collapse onto the bounds and yield zero-length segments.
    n_planes = width + 1 + height + 1
    alphas = np.empty((n_planes + 2, n_rays))
    planes_x = x_lo + pixel_size * np.arange(width + 1)
    planes_y = y_lo + pixel_size * np.arange(height + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (planes_x[:, None] - src[0]) / d[None, :, 0]
        ay = (planes_y[:, None] - src[1]) / d[None, :, 1]
    ax = np.where(np.abs(d[None, :, 0]) < _EPS, np.inf, ax)
    ay = np.where(np.abs(d[None, :, 1]) < _EPS, np.inf, ay)
    alphas[: width + 1] = ax
    alphas[width + 1 : n_planes] = ay
    alphas[n_planes] = a_enter
    alphas[n_planes + 1] = a_exit
    np.clip(alphas, a_enter[None, :], a_exit[None, :], out=alphas)
    alphas.sort(axis=0)

    seg = np.diff(alphas, axis=0)  # (n_planes + 1, n_rays)
    mids = 0.5 * (alphas[:-1] + alphas[1:])
    mx = src[0] + mids * d[None, :, 0]
    my = src[1] + mids * d[None, :, 1]
    jx = np.floor((mx - x_lo) / pixel_size).astype(np.int64)
    iy = np.floor((my - y_lo) / pixel_size).astype(np.int64)

    keep = (
        (seg > _EPS)
        & alive[None, :]
        & (jx >= 0)
        & (jx < width)
        & (iy >= 0)
        & (iy < height)
    )
    k_seg, k_ray = np.nonzero(keep)
    lengths = seg[k_seg, k_ray] * ray_len[k_ray]
    pixels = iy[k_seg, k_ray] * width + jx[k_seg, k_ray]
    return k_ray, pixels, lengths


@lru_cache(maxsize=8)
def _system_matrix(
    geom: FanBeamGeometry, width: int, height: int, pixel_size: float
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(A, A^T) as CSR, rows ordered by (view, detector bin)."""
    rows, cols, vals = [], [], []
    for v, theta in enumerate(geom.angles):
        src = geom.source_position(theta)
        det = geom.detector_positions(theta)
        r, c, length = _siddon_view_entries(src, det, width, height, pixel_size)
        rows.append(r + v * geom.n_det)
        cols.append(c)
        vals.append(length)
    a = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_views * geom.n_det, width * height),
    ).tocsr()
    return a, a.T.tocsr()


class FanBeamProjector:
    """Cached sparse projection operator for one (geometry, grid) pair."""

    def __init__(self, geom: FanBeamGeometry, like: ImageGrid):
        self.geom = geom
        self.width = like.width
        self.height = like.height
        self.pixel_size = like.pixel_size
        self.matrix, self.matrix_t = _system_matrix(
            geom, like.width, like.height, like.pixel_size
        )
        self._view_cache: dict[tuple[int, ...], tuple[sp.csr_matrix, sp.csr_matrix]] = {}

    def _check_image(self, img: ImageGrid):
        if img.width != self.width or img.height != self.height:
            raise ValueError("image shape does not match projector grid")
        if img.pixel_size != self.pixel_size:
            raise ValueError("image pixel size does not match projector grid")

    def project(self, img: ImageGrid) -> np.ndarray:
        """Line integrals, shape (n_views, n_det), dimensionless."""
        self._check_image(img)
        out = self.matrix @ img.ravel()
        return out.reshape(self.geom.n_views, self.geom.n_det)

    def backproject(self, sino: np.ndarray) -> ImageGrid:
        """Exact adjoint of :meth:`project`."""
        sino = np.asarray(sino, dtype=np.float64)
        if sino.size != self.geom.n_views * self.geom.n_det:
            raise ValueError("sinogram size does not match geometry")
        if not np.all(np.isfinite(sino)):
            raise ValueError("sinogram contains non-finite values")
        img = self.matrix_t @ sino.reshape(-1)
        return ImageGrid(
            self.width, self.height, self.pixel_size, img.reshape(self.height, self.width)
        )

    def _view_ops(self, views: tuple[int, ...]) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        ops = self._view_cache.get(views)
        if ops is None:
            rows = np.concatenate(
                [np.arange(v * self.geom.n_det, (v + 1) * self.geom.n_det) for v in views]
            )
            a_s = self.matrix[rows]
            ops = (a_s, a_s.T.tocsr())
            self._view_cache[views] = ops
        return ops

    def project_views(self, img: ImageGrid, views: tuple[int, ...]) -> np.ndarray:
        """Line integrals restricted to a view subset, shape (len(views), n_det)."""
        self._check_image(img)
        a_s, _ = self._view_ops(views)
        return (a_s @ img.ravel()).reshape(len(views), self.geom.n_det)

    def backproject_views(self, sino: np.ndarray, views: tuple[int, ...]) -> ImageGrid:
        _, at_s = self._view_ops(views)
        img = at_s @ np.asarray(sino, dtype=np.float64).reshape(-1)
        return ImageGrid(
            self.width, self.height, self.pixel_size, img.reshape(self.height, self.width)
        )


def project(img: ImageGrid, geom: FanBeamGeometry) -> np.ndarray:
    """Fan-beam line integrals of ``img``, shape (n_views, n_det)."""
    if not np.all(np.isfinite(img.data)):
        raise ValueError("image contains non-finite values")
    return FanBeamProjector(geom, img).project(img)


def backproject(sino: np.ndarray, geom: FanBeamGeometry, like: ImageGrid) -> ImageGrid:
    """Adjoint of :func:`project` onto the grid described by ``like``."""
    return FanBeamProjector(geom, like).backproject(sino)


@dataclass(frozen=True, eq=False)
class GainBlurOperator:
    """Per-bin fluence gain followed by a shift-invariant 1D detector blur.

    ``fluence_gain`` is the incident photon count per detector bin (scalar or
    per-bin array); ``blur_sigma`` is the Gaussian kernel width in detector
    pixels.  The blur kernel is normalized to unit sum and applied with
    reflective (edge-repeating) boundary handling; ``blur_sigma = 0`` is pure
    gain.
    """

    fluence_gain: float | np.ndarray
    blur_sigma: float = 0.0

    def __post_init__(self):
        gain = np.asarray(self.fluence_gain, dtype=np.float64)
        if np.any(gain <= 0) or not np.all(np.isfinite(gain)):
            raise ValueError("fluence_gain must be positive and finite")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        object.__setattr__(self, "fluence_gain", gain)

    def kernel(self) -> np.ndarray:
        """Unit-sum Gaussian taps, truncated at 4 sigma."""
        if self.blur_sigma == 0:
            return np.array([1.0])
        radius = max(1, math.ceil(4 * self.blur_sigma))
        k = np.arange(-radius, radius + 1, dtype=np.float64)
        taps = np.exp(-0.5 * (k / self.blur_sigma) ** 2)
        return taps / taps.sum()

    def gain_vector(self, n_det: int) -> np.ndarray:
        gain = self.fluence_gain
        if gain.ndim == 0:
            return np.full(n_det, float(gain))
        if gain.shape != (n_det,):
            raise ValueError("per-bin gain length does not match detector")
        return gain

    def _blur_matrices(self, n_det: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        return _blur_matrices(self.blur_sigma, n_det)


@lru_cache(maxsize=16)
def _blur_matrices(blur_sigma: float, n_det: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(M, M^T) as sparse CSR; M applies the reflective-boundary kernel."""
    taps = GainBlurOperator(1.0, blur_sigma).kernel()
    if taps.size == 1:
        eye = sp.identity(n_det, format="csr")
        return eye, eye
    radius = taps.size // 2
    padded_eye = np.pad(np.eye(n_det), ((radius, radius), (0, 0)), mode="symmetric")
    m = np.zeros((n_det, n_det))
    for k in range(taps.size):
        m += taps[k] * padded_eye[k : k + n_det]
    m_csr = sp.csr_matrix(m)
    return m_csr, m_csr.T.tocsr()


def apply_gain_blur(flux: np.ndarray, op: GainBlurOperator) -> np.ndarray:
    """B v = blur(gain * v) per view along the detector axis; returns mean counts."""
    flux = np.asarray(flux, dtype=np.float64)
    if not np.all(np.isfinite(flux)):
        raise ValueError("flux contains non-finite values")
    if np.any(flux < 0):
        raise ValueError("flux must be nonnegative")
    n_det = flux.shape[-1]
    gain = op.gain_vector(n_det)
    m, _ = op._blur_matrices(n_det)
    return (m @ (flux * gain).T).T


def adjoint_gain_blur(residual: np.ndarray, op: GainBlurOperator) -> np.ndarray:
    """B^T r = gain * correlate(r); exact adjoint of :func:`apply_gain_blur`."""
    residual = np.asarray(residual, dtype=np.float64)
    n_det = residual.shape[-1]
    gain = op.gain_vector(n_det)
    _, mt = op._blur_matrices(n_det)
    return (mt @ residual.T).T * gain
