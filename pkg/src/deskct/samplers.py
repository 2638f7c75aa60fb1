"""Diffusion posterior sampling for the nonlinear count model.

Two reconstruction modes share the ancestral reverse-diffusion step:

* baseline: full reverse chain from pure noise; each step applies one
  likelihood-gradient update routed through the posterior-mean Jacobian
  (Jacobian-vector product), with the step size normalized by the guidance
  gradient norm.
* stable: reverse sampling jumpstarted at step ``t_prime`` from a diffused
  initial estimate (typically FBP); the posterior-mean Jacobian is replaced
  by identity and each step runs several Adam sub-iterations on the
  posterior-mean image using ordered-subset likelihood gradients, after
  which the diffusion state is recombined.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from deskct.forward import LikelihoodModel, Measurement, SubsetPartition
from deskct.grid import ImageGrid
from deskct.schedule import NoiseSchedule
from deskct.scores import JvpUnavailableError, ScoreModel, posterior_mean_jvp

WORKERS_ENV = "DESKCT_WORKERS"


class SamplerDivergence(RuntimeError):
    """Non-finite sampler state; carries the failing step and norm history."""

    def __init__(self, mode: str, step: int, norm_history: tuple[float, ...]):
        self.mode = mode
        self.step = step
        self.norm_history = norm_history
        super().__init__(
            f"{mode} sampler diverged at step {step} "
            f"(last update norms: {[f'{n:.3e}' for n in norm_history[-5:]]})"
        )


@dataclass(frozen=True)
class AdamParams:
    gamma1: float = 0.9
    gamma2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "stable"  # "baseline" | "stable"
    t_prime: int = 40  # start step for stable mode
    eta: float = 0.01  # per-mode step size (see run_* docstrings)
    n_subsets: int = 1  # subsets == likelihood sub-iterations per step
    adam: AdamParams = AdamParams()
    seed: int = 0
    n_runs: int = 1

    def __post_init__(self):
        if self.mode not in ("baseline", "stable"):
            raise ValueError("mode must be 'baseline' or 'stable'")
        if self.t_prime < 1:
            raise ValueError("t_prime must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def adam_update(
    state: AdamState,
    x: np.ndarray,
    grad: np.ndarray,
    eta: float,
    params: AdamParams = AdamParams(),
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step; returns the new (state, iterate)."""
    if grad.shape != x.shape or state.m.shape != x.shape:
        raise ValueError("gradient/state shape mismatch")
    count = state.count + 1
    m = params.gamma1 * state.m + (1.0 - params.gamma1) * grad
    v = params.gamma2 * state.v + (1.0 - params.gamma2) * grad * grad
    m_hat = m / (1.0 - params.gamma1**count)
    v_hat = v / (1.0 - params.gamma2**count)
    x_new = x - eta * m_hat / (np.sqrt(v_hat) + params.eps)
    return AdamState(m, v, count), x_new


def ancestral_step(
    x_t: np.ndarray,
    t: int,
    x0_hat: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One reverse-diffusion step from ``x_t`` toward ``x_{t-1}``.

    The noise draw happens at every step so that generator streams stay
    aligned across configurations; at t = 1 its coefficient is zero and the
    step is deterministic.
    """
    ab_prev = schedule.alpha_bar(t - 1)
    ab = schedule.alpha_bar(t)
    beta = schedule.beta_at(t)
    coef_xt = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    z = rng.standard_normal(x_t.shape)
    return coef_xt * x_t + coef_x0 * x0_hat + schedule.sigma(t) * z


def jumpstart_init(
    init: np.ndarray, t_prime: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Diffuse an initial estimate up to ``t_prime`` to seed reverse sampling."""
    ab = schedule.alpha_bar(t_prime)
    return np.sqrt(ab) * init + np.sqrt(1.0 - ab) * rng.standard_normal(init.shape)


class CountingScoreModel:
    """Pass-through wrapper counting noise-predictor and JVP evaluations."""

    def __init__(self, inner: ScoreModel):
        self.inner = inner
        self.n_predict = 0
        self.n_jvp = 0

    @property
    def grid(self) -> ImageGrid:
        return self.inner.grid

    @property
    def has_jvp(self) -> bool:
        return getattr(self.inner, "has_jvp", False)

    def predict_eps(self, x_t, t, schedule):
        self.n_predict += 1
        return self.inner.predict_eps(x_t, t, schedule)

    def jvp_eps(self, x_t, t, schedule, v):
        self.n_jvp += 1
        return self.inner.jvp_eps(x_t, t, schedule, v)


def _likelihood(m: Measurement, grid: ImageGrid) -> LikelihoodModel:
    return LikelihoodModel(m, grid.width, grid.height, grid.pixel_size)


def _rng_for(cfg: SamplerConfig) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))


def unconditional_sample(
    model: ScoreModel,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    t_start: int,
    x_start: np.ndarray | None = None,
) -> np.ndarray:
    """Plain ancestral sampling (no measurement); the eta = 0 reference."""
    x = rng.standard_normal(model.grid.shape) if x_start is None else x_start
    for t in range(t_start, 0, -1):
        eps_hat = model.predict_eps(x, t, schedule)
        ab = schedule.alpha_bar(t)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        x = ancestral_step(x, t, x0_hat, schedule, rng)
    return x


def run_baseline_dps(
    m: Measurement,
    model: ScoreModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> ImageGrid:
    """Full reverse chain from pure noise with per-step guidance.

    The guidance direction is the likelihood gradient at the posterior-mean
    estimate pulled back through the posterior-mean Jacobian; the applied
    step is ``eta * g / ||g||_2`` (gradient-norm normalization), so ``eta``
    is the update magnitude in image units.
    """
    if not getattr(model, "has_jvp", False):
        raise JvpUnavailableError(
            "baseline sampling needs posterior-mean Jacobian products"
        )
    grid = model.grid
    lik = _likelihood(m, grid)
    rng = _rng_for(cfg) if rng is None else rng
    x = rng.standard_normal(grid.shape)
    norms: list[float] = []
    for t in range(schedule.n_steps, 0, -1):
        ab = schedule.alpha_bar(t)
        eps_hat = model.predict_eps(x, t, schedule)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        if not np.all(np.isfinite(x0_hat)):
            raise SamplerDivergence("baseline", t, tuple(norms))
        x_prev = ancestral_step(x, t, x0_hat, schedule, rng)
        if cfg.eta > 0:
            g = posterior_mean_jvp(x, t, model, schedule, lik.gradient(x0_hat))
            norm = float(np.linalg.norm(g))
            norms.append(norm)
            if norm > 0:
                x_prev = x_prev - (cfg.eta / norm) * g
        if not np.all(np.isfinite(x_prev)):
            raise SamplerDivergence("baseline", t, tuple(norms))
        x = x_prev
    return grid.with_data(x)


def run_stable_dps(
    m: Measurement,
    model: ScoreModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    init: ImageGrid,
    rng: np.random.Generator | None = None,
) -> ImageGrid:
    """Jumpstarted sampling with multi-step ordered-subset likelihood updates.

    Per reverse step: ancestral update, then ``n_subsets`` Adam sub-iterations
    on the posterior-mean image (one ordered subset each, visited in
    bit-reversal order, Adam state reset every step), then recombination
    ``x_{t-1} = x'_{t-1} - x0_hat + x0_hat'``.  ``eta`` is the absolute Adam
    step size; the posterior-mean Jacobian is replaced by identity.
    """
    grid = model.grid
    if not init.congruent(grid):
        raise ValueError("init grid does not match the model grid")
    if cfg.t_prime > schedule.n_steps:
        raise ValueError("t_prime exceeds the schedule length")
    lik = _likelihood(m, grid)
    part = SubsetPartition.interleaved(m.geometry.n_views, cfg.n_subsets)
    order = part.visit_order()
    rng = _rng_for(cfg) if rng is None else rng
    x = jumpstart_init(init.data, cfg.t_prime, schedule, rng)
    norms: list[float] = []
    for t in range(cfg.t_prime, 0, -1):
        ab = schedule.alpha_bar(t)
        eps_hat = model.predict_eps(x, t, schedule)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        if not np.all(np.isfinite(x0_hat)):
            raise SamplerDivergence("stable", t, tuple(norms))
        x_prev = ancestral_step(x, t, x0_hat, schedule, rng)
        if cfg.eta > 0:
            x0_new = x0_hat
            state = AdamState.zeros(grid.shape)
            for s in order:
                g = lik.subset_gradient(x0_new, part, s)
                norms.append(float(np.linalg.norm(g)))
                state, x0_new = adam_update(state, x0_new, g, cfg.eta, cfg.adam)
            x_prev = x_prev - x0_hat + x0_new
        if not np.all(np.isfinite(x_prev)):
            raise SamplerDivergence("stable", t, tuple(norms))
        x = x_prev
    return grid.with_data(x)


@dataclass(frozen=True, eq=False)
class RunEnsemble:
    """Stack of repeated reconstructions of one measurement."""

    images: np.ndarray  # (n_runs, height, width)
    pixel_size: float
    truth: ImageGrid | None = None
    roi_mask: np.ndarray | None = None
    diverged: tuple[int, ...] = ()  # run indices that aborted
    n_predict_evals: int = 0
    n_jvp_evals: int = 0

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 3 or images.shape[0] < 1:
            raise ValueError("need a (n_runs, height, width) stack")
        object.__setattr__(self, "images", images)
        if self.truth is not None and self.truth.shape != images.shape[1:]:
            raise ValueError("truth shape does not match runs")
        if self.roi_mask is not None:
            mask = np.asarray(self.roi_mask, dtype=bool)
            if mask.shape != images.shape[1:]:
                raise ValueError("mask shape does not match runs")
            object.__setattr__(self, "roi_mask", mask)

    @property
    def n_runs(self) -> int:
        return self.images.shape[0]

    def image(self, i: int) -> ImageGrid:
        return ImageGrid.from_array(self.images[i], self.pixel_size)

    def with_truth(self, truth: ImageGrid, roi_mask: np.ndarray | None = None):
        return RunEnsemble(
            self.images,
            self.pixel_size,
            truth,
            roi_mask,
            self.diverged,
            self.n_predict_evals,
            self.n_jvp_evals,
        )


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_ensemble(
    m: Measurement,
    model: ScoreModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    init: ImageGrid | None = None,
    on_divergence: str = "raise",
) -> RunEnsemble:
    """``cfg.n_runs`` independent reconstructions of the same measurement.

    Per-run generators are spawned from ``cfg.seed``, so the ensemble is
    bit-reproducible and independent of the worker count (``DESKCT_WORKERS``).
    With ``on_divergence="record"`` failed runs are dropped from the stack and
    their indices reported instead of raising.
    """
    if on_divergence not in ("raise", "record"):
        raise ValueError("on_divergence must be 'raise' or 'record'")
    if cfg.mode == "stable" and init is None:
        raise ValueError("stable mode needs an initial estimate")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_runs)

    def one(i: int):
        rng = np.random.Generator(np.random.Philox(seeds[i]))
        counter = CountingScoreModel(model)
        try:
            if cfg.mode == "baseline":
                img = run_baseline_dps(m, counter, schedule, cfg, rng=rng)
            else:
                img = run_stable_dps(m, counter, schedule, cfg, init, rng=rng)
            return img.data, None, counter
        except SamplerDivergence as exc:
            if on_divergence == "raise":
                raise
            return None, exc, counter

    workers = min(worker_count(), cfg.n_runs)
    if workers == 1:
        results = [one(i) for i in range(cfg.n_runs)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(cfg.n_runs)))

    images = [r[0] for r in results if r[0] is not None]
    diverged = tuple(i for i, r in enumerate(results) if r[0] is None)
    if not images:
        raise SamplerDivergence(cfg.mode, -1, ())
    grid = model.grid
    return RunEnsemble(
        np.stack(images),
        grid.pixel_size,
        diverged=diverged,
        n_predict_evals=sum(r[2].n_predict for r in results),
        n_jvp_evals=sum(r[2].n_jvp for r in results),
    )
