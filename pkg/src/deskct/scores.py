"""Analytic noise-predictor models and posterior-mean (Tweedie) machinery.

A score model predicts the noise component of a diffused image
``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.  For the noise predictor to
be exact it must equal ``-sqrt(1 - abar_t)`` times the score of the marginal
density of ``x_t``, which is available in closed form when the clean-image
prior is a Gaussian or a Gaussian mixture.  Both models also provide exact
Jacobian-vector products, so samplers needing the posterior-mean Jacobian can
be validated against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from deskct.grid import ImageGrid
from deskct.schedule import NoiseSchedule


class JvpUnavailableError(RuntimeError):
    """Raised when a model cannot produce Jacobian-vector products."""


@runtime_checkable
class ScoreModel(Protocol):
    grid: ImageGrid
    has_jvp: bool

    def predict_eps(
        self, x_t: np.ndarray, t: int, schedule: NoiseSchedule
    ) -> np.ndarray: ...

    def jvp_eps(
        self, x_t: np.ndarray, t: int, schedule: NoiseSchedule, v: np.ndarray
    ) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Clean-image prior N(mean, diag(variance)); everything is elementwise."""

    mean: ImageGrid
    variance: float | np.ndarray
    has_jvp: bool = field(default=True, init=False)

    def __post_init__(self):
        var = np.broadcast_to(
            np.asarray(self.variance, dtype=np.float64), self.mean.shape
        ).copy()
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("variance must be positive and finite")
        object.__setattr__(self, "variance", var)

    @property
    def grid(self) -> ImageGrid:
        return self.mean

    def _coeff(self, t: int, schedule: NoiseSchedule) -> tuple[float, np.ndarray]:
        ab = schedule.alpha_bar(t)
        return ab, ab * self.variance + (1.0 - ab)

    def predict_eps(self, x_t, t, schedule):
        ab, marg_var = self._coeff(t, schedule)
        return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * self.mean.data) / marg_var

    def jvp_eps(self, x_t, t, schedule, v):
        ab, marg_var = self._coeff(t, schedule)
        return np.sqrt(1.0 - ab) / marg_var * v

    def log_density(self, x: np.ndarray) -> float:
        d = x - self.mean.data
        return float(
            -0.5 * np.sum(d * d / self.variance + np.log(2 * np.pi * self.variance))
        )

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean.data + np.sqrt(self.variance) * rng.standard_normal(
            self.mean.shape
        )


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Mixture of isotropic Gaussians over images.

    ``means`` is (K, height, width); ``variances`` and ``weights`` are (K,).
    The marginal of the diffusion at step t is again a mixture, with means
    ``sqrt(abar) m_k`` and variances ``abar v_k + (1 - abar)``, so the score,
    the noise predictor, and their Jacobians are exact.  The Hessian is
    applied in factored form (diagonal plus rank-K responsibility terms);
    no pixel-by-pixel matrix is ever materialized.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    pixel_size: float
    has_jvp: bool = field(default=True, init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if m.ndim != 3 or w.shape != (m.shape[0],) or v.shape != (m.shape[0],):
            raise ValueError("need K means (K,h,w) with K weights and K variances")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def grid(self) -> ImageGrid:
        return ImageGrid.from_array(self.means[0], self.pixel_size)

    def _marginal(self, t: int, schedule: NoiseSchedule):
        ab = schedule.alpha_bar(t)
        return ab, np.sqrt(ab) * self.means, ab * self.variances + (1.0 - ab)

    def _log_resp(self, x: np.ndarray, means_t: np.ndarray, vars_t: np.ndarray):
        """Log responsibilities; max-subtracted so small-t underflow is safe."""
        n = x.size
        d2 = np.sum((x[None] - means_t) ** 2, axis=(1, 2))
        log_like = -0.5 * (d2 / vars_t + n * np.log(2 * np.pi * vars_t))
        log_post = np.log(self.weights) + log_like
        return log_post - logsumexp(log_post)

    def _score_terms(self, x, t, schedule):
        ab, means_t, vars_t = self._marginal(t, schedule)
        resp = np.exp(self._log_resp(x, means_t, vars_t))
        pulls = (means_t - x[None]) / vars_t[:, None, None]  # (K, h, w)
        score = np.tensordot(resp, pulls, axes=1)
        return ab, vars_t, resp, pulls, score

    def predict_eps(self, x_t, t, schedule):
        ab, _, _, _, score = self._score_terms(x_t, t, schedule)
        return -np.sqrt(1.0 - ab) * score

    def jvp_eps(self, x_t, t, schedule, v):
        ab, vars_t, resp, pulls, score = self._score_terms(x_t, t, schedule)
        widths = float(np.sum(resp / vars_t))
        dots = np.tensordot(pulls, v, axes=2)  # (K,)
        hess_v = (
            -widths * v
            + np.tensordot(resp * dots, pulls, axes=1)
            - score * float(np.sum(score * v))
        )
        return -np.sqrt(1.0 - ab) * hess_v

    def log_density(self, x: np.ndarray) -> float:
        n = x.size
        d2 = np.sum((x[None] - self.means) ** 2, axis=(1, 2))
        log_like = -0.5 * (d2 / self.variances + n * np.log(2 * np.pi * self.variances))
        return float(logsumexp(np.log(self.weights) + log_like))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.n_components, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal(
            self.means[k].shape
        )


def tweedie_x0(
    x_t: np.ndarray, t: int, model: ScoreModel, schedule: NoiseSchedule
) -> np.ndarray:
    """Posterior-mean estimate ``(x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)``."""
    ab = schedule.alpha_bar(t)
    eps = model.predict_eps(x_t, t, schedule)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def posterior_mean_jvp(
    x_t: np.ndarray,
    t: int,
    model: ScoreModel,
    schedule: NoiseSchedule,
    v: np.ndarray,
) -> np.ndarray:
    """Directional derivative of the posterior-mean estimate:

    ``(v - sqrt(1 - abar) * jvp_eps(v)) / sqrt(abar)``.

    For score models whose noise predictor is the gradient field of a
    log-density (both analytic priors here), the Jacobian is symmetric, so
    this doubles as the transpose product needed for guidance gradients.
    """
    if not getattr(model, "has_jvp", False):
        raise JvpUnavailableError(
            "model does not provide Jacobian-vector products"
        )
    ab = schedule.alpha_bar(t)
    return (v - np.sqrt(1.0 - ab) * model.jvp_eps(x_t, t, schedule, v)) / np.sqrt(ab)


@dataclass(frozen=True, eq=False)
class ScaledJacobianBlock:
    """Local block of ``sqrt(1 - abar_t) * d eps / d x`` with identity diagnostics."""

    matrix: np.ndarray
    off_diagonal_energy_fraction: float
    max_diagonal_deviation: float


def jacobian_approximation_check(
    model: ScoreModel,
    x_t: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    pixel_segment: np.ndarray,
) -> ScaledJacobianBlock:
    """Measure how close the scaled noise-predictor Jacobian is to identity.

    Builds the (k, k) block of ``sqrt(1 - abar_t) * [d eps_i / d x_j]``
    restricted to ``pixel_segment`` (flat pixel indices, at most 64),
    column by column via Jacobian-vector products.
    """
    seg = np.asarray(pixel_segment, dtype=np.int64).reshape(-1)
    if seg.size == 0 or seg.size > 64:
        raise ValueError("pixel segment must have 1..64 entries")
    ab = schedule.alpha_bar(t)
    scale = np.sqrt(1.0 - ab)
    k = seg.size
    block = np.empty((k, k))
    for col, j in enumerate(seg):
        e = np.zeros(x_t.size)
        e[j] = 1.0
        jv = model.jvp_eps(x_t, t, schedule, e.reshape(x_t.shape))
        block[:, col] = scale * jv.reshape(-1)[seg]
    total = float(np.sum(block * block))
    diag = np.diag(block)
    off = total - float(np.sum(diag * diag))
    return ScaledJacobianBlock(
        matrix=block,
        off_diagonal_energy_fraction=off / total if total > 0 else 0.0,
        max_diagonal_deviation=float(np.max(np.abs(diag - 1.0))),
    )
