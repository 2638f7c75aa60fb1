"""Procedural ellipse phantoms and priors matched to their randomized families.

Families are parameterized in millimetres for a nominal 256 mm field of view;
grids of any resolution can rasterize them by choosing the pixel size.
Test objects drawn from a family are in-distribution for the matched prior
built from the same family, which is what the reconstruction studies assume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.cluster import KMeans

from deskct.grid import ImageGrid
from deskct.scores import GaussianPrior, GmmPrior

MAX_ATTENUATION = 0.06  # mm^-1, soft-tissue/bone range
MIN_PRIOR_SAMPLES = 16


@dataclass(frozen=True)
class Ellipse:
    cx: float  # mm
    cy: float  # mm
    a: float  # semi-axis, mm
    b: float  # semi-axis, mm
    rot: float  # radians
    value: float  # additive attenuation, mm^-1

    def __post_init__(self):
        for name in ("cx", "cy", "a", "b", "rot", "value"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.a <= 0 or self.b <= 0:
            raise ValueError("semi-axes must be positive")
        if abs(self.value) > MAX_ATTENUATION:
            raise ValueError("ellipse attenuation outside the supported range")


@dataclass(frozen=True)
class EllipsePhantomSpec:
    ellipses: tuple[Ellipse, ...]
    background: float = 0.0

    def __post_init__(self):
        if not (0 <= self.background <= MAX_ATTENUATION):
            raise ValueError("background attenuation outside the supported range")


def rasterize(
    spec: EllipsePhantomSpec, width: int, height: int, pixel_size: float
) -> ImageGrid:
    """Pixel-center inclusion test with additive composition."""
    half_extent = min(width, height) / 2.0 * pixel_size
    out = np.full((height, width), spec.background)
    xs, ys = ImageGrid.zeros(width, height, pixel_size).pixel_centers()
    for e in spec.ellipses:
        if np.hypot(e.cx, e.cy) + max(e.a, e.b) > half_extent:
            raise ValueError("ellipse extends outside the grid")
        dx = xs - e.cx
        dy = ys - e.cy
        u = dx * np.cos(e.rot) + dy * np.sin(e.rot)
        v = -dx * np.sin(e.rot) + dy * np.cos(e.rot)
        out[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.value
    if out.min() < 0 or out.max() > MAX_ATTENUATION:
        raise ValueError("composite attenuation outside [0, 0.06] mm^-1")
    return ImageGrid(width, height, pixel_size, out)


def _jitter(rng: np.random.Generator, scale: float) -> float:
    """Gaussian jitter truncated at 3 sigma (keeps composites in range)."""
    return float(np.clip(rng.normal(0.0, scale), -3 * scale, 3 * scale))


def _chest_lite(rng: np.random.Generator) -> EllipsePhantomSpec:
    """Torso-like object: body, two lungs, spine, heart, random lung nodules.

    Shapes and tissue values are both jittered so the matched prior has a
    spread comparable to a generative anatomy model, not just edge
    uncertainty; composite attenuation stays within [0, 0.06] at 3 sigma.
    """
    j = lambda scale: _jitter(rng, scale)
    body = 0.019 + j(0.003)  # in [0.010, 0.028]
    lung_total = 0.004 + j(0.001)  # lung attenuation after the body is subtracted
    ellipses = [
        Ellipse(0.0, 0.0, 105 + j(2), 80 + j(2), 0.0, body),
        Ellipse(-45 + j(2), 6 + j(2), 30 + j(2), 46 + j(2), 0.15, lung_total - body),
        Ellipse(45 + j(2), 6 + j(2), 30 + j(2), 46 + j(2), -0.15, lung_total - body),
        Ellipse(j(1), -58 + j(1.5), 13.0, 13.0, 0.0, 0.024 + j(0.002)),
        Ellipse(8 + j(2), 22 + j(3), 24 + j(2), 20 + j(2), 0.3, 0.003 + j(0.0008)),
    ]
    # Nodules are kept pairwise disjoint (and clear of the spine) so
    # composites stay within range.
    nodules: list[tuple[float, float, float]] = []
    for _ in range(rng.integers(1, 5)):
        for _ in range(20):
            side = rng.choice([-1.0, 1.0])
            cx = side * 45 + j(10)
            cy = 10 + j(12)
            r = float(rng.uniform(3, 8))
            if all(np.hypot(cx - ox, cy - oy) > 1.2 * (r + orad) for ox, oy, orad in nodules):
                nodules.append((cx, cy, r))
                ellipses.append(
                    Ellipse(
                        cx,
                        cy,
                        r,
                        r * float(rng.uniform(0.8, 1.2)),
                        float(rng.uniform(0, np.pi)),
                        0.012 + j(0.0025),
                    )
                )
                break
    return EllipsePhantomSpec(tuple(ellipses))


def _disk(rng: np.random.Generator) -> EllipsePhantomSpec:
    r = float(rng.uniform(34, 46))
    return EllipsePhantomSpec(
        (
            Ellipse(
                float(rng.uniform(-6, 6)),
                float(rng.uniform(-6, 6)),
                r,
                r,
                0.0,
                float(rng.uniform(0.017, 0.023)),
            ),
        )
    )


def _ood_homogeneous(rng: np.random.Generator) -> EllipsePhantomSpec:
    # Deliberately structureless: a uniform body-size ellipse, no randomness.
    return EllipsePhantomSpec((Ellipse(0.0, 0.0, 100.0, 75.0, 0.0, 0.02),))


FAMILIES: dict[str, Callable[[np.random.Generator], EllipsePhantomSpec]] = {
    "chest-lite": _chest_lite,
    "disk": _disk,
    "ood-homogeneous": _ood_homogeneous,
}


def sample_phantom(family: str, seed: int) -> EllipsePhantomSpec:
    if family not in FAMILIES:
        raise ValueError(f"unknown phantom family {family!r}")
    return FAMILIES[family](np.random.default_rng(seed))


def build_matched_prior(
    family: str | Callable[[np.random.Generator], EllipsePhantomSpec],
    n_samples: int,
    mode: str,
    width: int,
    height: int,
    pixel_size: float,
    seed: int = 0,
    n_components: int = 2,
    variance_floor: float = 1e-8,
) -> GaussianPrior | GmmPrior:
    """Empirical prior over rasterizations of a randomized phantom family.

    gaussian mode: per-pixel mean and floored per-pixel variance.
    gmm mode: k-means cluster centers with per-cluster isotropic variance.
    """
    if n_samples < MIN_PRIOR_SAMPLES:
        raise ValueError(f"need at least {MIN_PRIOR_SAMPLES} samples")
    if mode not in ("gaussian", "gmm"):
        raise ValueError("mode must be 'gaussian' or 'gmm'")
    sampler = FAMILIES[family] if isinstance(family, str) else family
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_samples)]
    stack = np.stack(
        [rasterize(sampler(r), width, height, pixel_size).data for r in rngs]
    )
    if mode == "gaussian":
        mean = ImageGrid.from_array(stack.mean(axis=0), pixel_size)
        var = np.maximum(stack.var(axis=0, ddof=0), variance_floor)
        return GaussianPrior(mean, var)
    flat = stack.reshape(n_samples, -1)
    km = KMeans(n_clusters=n_components, n_init=10, random_state=seed).fit(flat)
    weights = np.bincount(km.labels_, minlength=n_components) / n_samples
    if np.any(weights == 0):
        raise ValueError("empty cluster; reduce n_components or add samples")
    variances = np.empty(n_components)
    for k in range(n_components):
        member_dev = flat[km.labels_ == k] - km.cluster_centers_[k]
        variances[k] = max(float(np.mean(member_dev**2)), variance_floor)
    means = km.cluster_centers_.reshape(n_components, height, width)
    return GmmPrior(weights, means, variances, pixel_size)


def sample_attenuation(
    prior: GaussianPrior | GmmPrior, rng: np.random.Generator
) -> np.ndarray:
    """Prior draw clamped below at zero (attenuation cannot be negative)."""
    return np.maximum(prior.sample(rng), 0.0)


def format_phantom_text(spec: EllipsePhantomSpec) -> str:
    lines = [f"background {spec.background!r}"]
    for e in spec.ellipses:
        lines.append(
            f"ellipse {e.cx!r} {e.cy!r} {e.a!r} {e.b!r} {e.rot!r} {e.value!r}"
        )
    return "\n".join(lines) + "\n"


def parse_phantom_text(text: str) -> EllipsePhantomSpec:
    """Read the line-oriented phantom format (``background``/``ellipse`` rows)."""
    background = 0.0
    ellipses: list[Ellipse] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            if tokens[0] == "background" and len(tokens) == 2:
                background = float(tokens[1])
            elif tokens[0] == "ellipse" and len(tokens) == 7:
                ellipses.append(Ellipse(*(float(tok) for tok in tokens[1:])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad phantom line {lineno}: {raw!r}") from None
    return EllipsePhantomSpec(tuple(ellipses), background)
