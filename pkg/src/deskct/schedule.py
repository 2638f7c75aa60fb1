"""Discrete diffusion schedule, forward noising, and the jumpstart gap measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deskct.grid import ImageGrid


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variances ``beta[t-1]`` for t = 1..T and derived quantities.

    Index convention: t runs 1..T, with ``alpha_bar(0) == 1`` so the final
    ancestral step is deterministic (``sigma(1) == 0``).
    """

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("schedule needs at least 2 steps")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) <= 0):
            raise ValueError("beta values must be strictly increasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "_alpha_bar", np.cumprod(1.0 - beta))

    @property
    def n_steps(self) -> int:
        return self.beta.size

    def _check_t(self, t: int):
        if not (1 <= t <= self.n_steps):
            raise ValueError(f"step {t} outside 1..{self.n_steps}")

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self._alpha_bar[t - 1])

    def sigma(self, t: int) -> float:
        """Ancestral posterior std: sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t)."""
        self._check_t(t)
        ab_prev = self.alpha_bar(t - 1)
        ab = self.alpha_bar(t)
        return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab) * self.beta_at(t)))


def make_linear_schedule(
    n_steps: int, beta_first: float = 1e-4, beta_last: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced beta values, endpoints inclusive."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not (0 < beta_first < beta_last < 1):
        raise ValueError("require 0 < beta_first < beta_last < 1")
    return NoiseSchedule(np.linspace(beta_first, beta_last, n_steps))


def forward_diffuse(
    x0: ImageGrid,
    t: int,
    schedule: NoiseSchedule,
    seed: int,
    eps: np.ndarray | None = None,
) -> ImageGrid:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with seeded noise.

    ``eps`` may be supplied explicitly (e.g. zeros for the noiseless mean).
    """
    ab = schedule.alpha_bar(t)
    if eps is None:
        rng = np.random.Generator(np.random.Philox(key=seed))
        eps = rng.standard_normal(x0.shape)
    return x0.with_data(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps)


def kl_gap(delta_sq: float, alpha_bar: float) -> float:
    """``abar / (2 (1 - abar)) * ||delta||^2``: divergence between the
    t-step diffusions of two starting images whose difference has squared
    norm ``delta_sq``."""
    return alpha_bar / (2.0 * (1.0 - alpha_bar)) * delta_sq


def jumpstart_kl(
    x0_hat: ImageGrid, x0: ImageGrid, t: int, schedule: NoiseSchedule
) -> float:
    """Distribution gap at step t between diffusing ``x0_hat`` vs ``x0``.

    Shrinks toward zero as t grows, which is what licenses starting reverse
    sampling from a diffused coarse initial estimate.
    """
    if not x0_hat.congruent(x0):
        raise ValueError("grids do not match")
    schedule._check_t(t)
    delta = x0_hat.data - x0.data
    return kl_gap(float(np.sum(delta * delta)), schedule.alpha_bar(t))
