"""Image quality metrics and ensemble bias/variability maps."""

from __future__ import annotations

import math

import numpy as np

from deskct.grid import ImageGrid
from deskct.samplers import RunEnsemble

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(xhat: ImageGrid, x: ImageGrid):
    if not xhat.congruent(x):
        raise ValueError("images are not congruent")


def psnr(xhat: ImageGrid, x: ImageGrid) -> float:
    """10 log10(MAX^2 / MSE), MAX from the ground truth; +inf when identical."""
    _check_pair(xhat, x)
    peak = float(np.max(x.data))
    if peak <= 0:
        raise ValueError("ground truth peak is not positive; PSNR undefined")
    mse = float(np.mean((xhat.data - x.data) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _ssim_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    k = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (k / SSIM_SIGMA) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_stats(a: np.ndarray, b: np.ndarray, w: np.ndarray):
    """Gaussian-weighted local means/variances/covariance over valid windows."""
    va = np.lib.stride_tricks.sliding_window_view(a, w.shape)
    vb = np.lib.stride_tricks.sliding_window_view(b, w.shape)
    mu_a = np.tensordot(va, w, axes=2)
    mu_b = np.tensordot(vb, w, axes=2)
    var_a = np.tensordot(va * va, w, axes=2) - mu_a**2
    var_b = np.tensordot(vb * vb, w, axes=2) - mu_b**2
    cov = np.tensordot(va * vb, w, axes=2) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim(xhat: ImageGrid, x: ImageGrid) -> float:
    """Mean local structural similarity, 11x11 Gaussian window (sigma 1.5).

    Stabilizers are ``(0.01 L)^2`` and ``(0.03 L)^2`` with L the ground-truth
    dynamic range; only fully inside windows contribute.
    """
    _check_pair(xhat, x)
    if x.height < SSIM_WINDOW or x.width < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    dyn = float(np.max(x.data) - np.min(x.data))
    if dyn <= 0:
        raise ValueError("constant ground truth; SSIM undefined")
    c1 = (SSIM_K1 * dyn) ** 2
    c2 = (SSIM_K2 * dyn) ** 2
    mu_a, mu_b, var_a, var_b, cov = _windowed_stats(xhat.data, x.data, _ssim_window())
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def bias_map(ens: RunEnsemble) -> ImageGrid:
    """Pixelwise |ensemble mean - truth|."""
    if ens.truth is None:
        raise ValueError("ensemble has no ground truth")
    return ens.truth.with_data(np.abs(ens.images.mean(axis=0) - ens.truth.data))


def std_map(ens: RunEnsemble) -> ImageGrid:
    """Pixelwise ensemble standard deviation (population convention)."""
    if ens.n_runs < 2:
        raise ValueError("need at least 2 runs for a deviation map")
    return ImageGrid.from_array(ens.images.std(axis=0, ddof=0), ens.pixel_size)


def _mask_mean(img: np.ndarray, mask: np.ndarray | None) -> float:
    if mask is None:
        return float(img.mean())
    return float(img[mask].mean())


def ensemble_mean(ens: RunEnsemble) -> ImageGrid:
    return ImageGrid.from_array(ens.images.mean(axis=0), ens.pixel_size)


def summarize(ens: RunEnsemble) -> dict[str, float]:
    """Scalar report for one ensemble.

    ``std``/``bias`` are mask-averaged map values; ``psnr``/``ssim`` are
    computed on the ensemble mean, and ``psnr_per_run``/``ssim_per_run``
    give the across-run mean of single-run metrics (with their spread),
    since single-run and ensemble-mean quality can differ.
    """
    if ens.truth is None:
        raise ValueError("ensemble has no ground truth")
    mask = ens.roi_mask
    mean_img = ensemble_mean(ens)
    out: dict[str, float] = {
        "runs": float(ens.n_runs),
        "bias": _mask_mean(bias_map(ens).data, mask),
        "psnr": psnr(mean_img, ens.truth),
        "ssim": ssim(mean_img, ens.truth),
    }
    out["std"] = _mask_mean(std_map(ens).data, mask) if ens.n_runs > 1 else 0.0
    per_psnr = [psnr(ens.image(i), ens.truth) for i in range(ens.n_runs)]
    per_ssim = [ssim(ens.image(i), ens.truth) for i in range(ens.n_runs)]
    out["psnr_per_run"] = float(np.mean(per_psnr))
    out["psnr_per_run_std"] = float(np.std(per_psnr))
    out["ssim_per_run"] = float(np.mean(per_ssim))
    out["ssim_per_run_std"] = float(np.std(per_ssim))
    return out
