import numpy as np
import pytest
from scipy.special import logsumexp

from deskct.grid import ImageGrid
from deskct.schedule import NoiseSchedule, make_linear_schedule
from deskct.scores import (
    GaussianPrior,
    GmmPrior,
    JvpUnavailableError,
    ScaledJacobianBlock,
    jacobian_approximation_check,
    posterior_mean_jvp,
    tweedie_x0,
)


@pytest.fixture(scope="module")
def schedule():
    return make_linear_schedule(1000)


@pytest.fixture(scope="module")
def half_schedule():
    """Two steps engineered so alpha_bar(2) == 1/2 (up to rounding)."""
    return NoiseSchedule(np.array([0.2, 0.375]))


class ZeroModel:
    """Stub predicting zero noise; no Jacobian products."""

    has_jvp = False

    def __init__(self, grid: ImageGrid):
        self.grid = grid

    def predict_eps(self, x_t, t, schedule):
        return np.zeros_like(x_t)


def mc_score(prior, x_t, t, schedule, n=200_000, seed=0):
    """Self-normalized importance estimate of the marginal score at x_t.

    Samples x0 from the prior and reweights by the diffusion kernel
    N(x_t; sqrt(abar) x0, (1 - abar) I).
    """
    rng = np.random.default_rng(seed)
    ab = schedule.alpha_bar(t)
    x0 = np.stack([prior.sample(rng) for _ in range(n)])
    mean_t = np.sqrt(ab) * x0
    log_w = -np.sum((x_t[None] - mean_t) ** 2, axis=(1, 2)) / (2 * (1 - ab))
    w = np.exp(log_w - logsumexp(log_w))
    score = np.tensordot(w, (mean_t - x_t[None]) / (1 - ab), axes=1)
    post_mean = np.tensordot(w, x0, axes=1)
    ess = 1.0 / np.sum(w**2)
    return score, post_mean, ess


class TestGaussianPrior:
    def test_eps_zero_at_scaled_mean(self, schedule, rng):
        mu = ImageGrid.from_array(rng.standard_normal((3, 3)), 1.0)
        prior = GaussianPrior(mu, 0.7)
        t = 400
        x_t = np.sqrt(schedule.alpha_bar(t)) * mu.data
        np.testing.assert_array_equal(prior.predict_eps(x_t, t, schedule), 0.0)

    def test_scalar_case_at_half_alpha_bar(self, half_schedule, rng):
        # sigma0^2 = 1, abar = 1/2: eps = sqrt(1/2) * (x - sqrt(1/2) mu).
        mu = ImageGrid.from_array(rng.standard_normal((2, 2)), 1.0)
        prior = GaussianPrior(mu, 1.0)
        x_t = rng.standard_normal((2, 2))
        eps = prior.predict_eps(x_t, 2, half_schedule)
        expected = np.sqrt(0.5) * (x_t - np.sqrt(0.5) * mu.data)
        np.testing.assert_allclose(eps, expected, rtol=1e-12)

    def test_against_importance_sampled_score(self, schedule):
        rng = np.random.default_rng(3)
        mu = ImageGrid.from_array(0.1 * rng.standard_normal((2, 2)), 1.0)
        prior = GaussianPrior(mu, np.full((2, 2), 0.8))
        t = 700
        x_t = prior.mean.data * np.sqrt(schedule.alpha_bar(t)) + 0.3
        score_mc, _, ess = mc_score(prior, x_t, t, schedule, seed=11)
        assert ess > 1000
        eps = prior.predict_eps(x_t, t, schedule)
        expected = -np.sqrt(1 - schedule.alpha_bar(t)) * score_mc
        np.testing.assert_allclose(eps, expected, rtol=0.02)

    def test_variance_validation(self):
        with pytest.raises(ValueError):
            GaussianPrior(ImageGrid.zeros(2, 2, 1.0), 0.0)


class TestGmmPrior:
    def build(self, rng, k=3, shape=(2, 4)):
        means = np.stack([rng.standard_normal(shape) for _ in range(k)])
        weights = rng.uniform(0.2, 1.0, k)
        weights /= weights.sum()
        variances = rng.uniform(0.4, 1.5, k)
        return GmmPrior(weights, means, variances, 1.0)

    def test_single_component_reduces_to_gaussian(self, schedule, rng):
        mu = rng.standard_normal((2, 3))
        gmm = GmmPrior(np.array([1.0]), mu[None], np.array([0.6]), 1.0)
        gauss = GaussianPrior(ImageGrid.from_array(mu, 1.0), 0.6)
        x_t = rng.standard_normal((2, 3))
        v = rng.standard_normal((2, 3))
        for t in (5, 500, 1000):
            np.testing.assert_allclose(
                gmm.predict_eps(x_t, t, schedule),
                gauss.predict_eps(x_t, t, schedule),
                rtol=1e-12,
            )
            np.testing.assert_allclose(
                gmm.jvp_eps(x_t, t, schedule, v),
                gauss.jvp_eps(x_t, t, schedule, v),
                rtol=1e-12,
            )

    def test_symmetric_mixture_at_equidistant_point(self, schedule):
        # Components at +m and -m with equal weights: at x_t = 0 the
        # responsibilities are 1/2 each and the noise estimate aligns with
        # the (zero) mean of component means -- i.e. it vanishes.
        m = np.ones((2, 2))
        gmm = GmmPrior(np.array([0.5, 0.5]), np.stack([m, -m]), np.array([0.5, 0.5]), 1.0)
        t = 300
        eps = gmm.predict_eps(np.zeros((2, 2)), t, schedule)
        np.testing.assert_allclose(eps, 0.0, atol=1e-14)
        # Shifted mixture: same geometry around center c, eps points along -c
        # direction scaled; check against the averaged-pull closed form.
        c = np.full((2, 2), 0.3)
        gmm2 = GmmPrior(
            np.array([0.5, 0.5]), np.stack([c + m, c - m]), np.array([0.5, 0.5]), 1.0
        )
        ab = schedule.alpha_bar(t)
        x_t = np.sqrt(ab) * c  # equidistant from both diffused means
        eps2 = gmm2.predict_eps(x_t, t, schedule)
        marg_var = ab * 0.5 + (1 - ab)
        expected = -np.sqrt(1 - ab) * (np.sqrt(ab) * c - x_t) / marg_var
        np.testing.assert_allclose(eps2, expected, atol=1e-14)

    def test_jvp_against_finite_differences(self, schedule, rng):
        gmm = self.build(rng)
        x_t = rng.standard_normal((2, 4))
        v = rng.standard_normal((2, 4))
        h = 1e-6
        for t in (50, 400, 900):
            jv = gmm.jvp_eps(x_t, t, schedule, v)
            fd = (
                gmm.predict_eps(x_t + h * v, t, schedule)
                - gmm.predict_eps(x_t - h * v, t, schedule)
            ) / (2 * h)
            np.testing.assert_allclose(jv, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())

    def test_jvp_linear_in_v(self, schedule, rng):
        gmm = self.build(rng)
        x_t = rng.standard_normal((2, 4))
        v1 = rng.standard_normal((2, 4))
        v2 = rng.standard_normal((2, 4))
        lhs = gmm.jvp_eps(x_t, 300, schedule, 2.0 * v1 - v2)
        rhs = 2.0 * gmm.jvp_eps(x_t, 300, schedule, v1) - gmm.jvp_eps(
            x_t, 300, schedule, v2
        )
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-14)

    def test_against_importance_sampled_score(self, schedule, rng):
        means = 0.5 * np.stack([np.ones((2, 2)), -np.ones((2, 2))])
        gmm = GmmPrior(np.array([0.6, 0.4]), means, np.array([0.5, 0.9]), 1.0)
        t = 800
        x_t = np.full((2, 2), 0.2)
        score_mc, _, ess = mc_score(gmm, x_t, t, schedule, seed=21)
        assert ess > 1000
        eps = gmm.predict_eps(x_t, t, schedule)
        expected = -np.sqrt(1 - schedule.alpha_bar(t)) * score_mc
        np.testing.assert_allclose(eps, expected, rtol=0.02)

    def test_responsibility_saturation_far_from_boundary(self, schedule):
        # Deep inside one component's basin the mixture behaves like that
        # component alone.
        m = 5.0 * np.ones((2, 2))
        gmm = GmmPrior(np.array([0.5, 0.5]), np.stack([m, -m]), np.array([0.4, 0.4]), 1.0)
        gauss = GaussianPrior(ImageGrid.from_array(m, 1.0), 0.4)
        t = 10  # low noise: responsibilities saturate hard
        x_t = np.sqrt(schedule.alpha_bar(t)) * m + 0.05
        np.testing.assert_allclose(
            gmm.predict_eps(x_t, t, schedule),
            gauss.predict_eps(x_t, t, schedule),
            rtol=1e-8,
        )

    def test_log_domain_stability_at_small_t(self, schedule, rng):
        gmm = self.build(rng)
        x_t = 50.0 * np.ones((2, 4))  # far from every component
        eps = gmm.predict_eps(x_t, 2, schedule)
        assert np.all(np.isfinite(eps))

    def test_validation(self, rng):
        means = np.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            GmmPrior(np.array([0.5, 0.6]), means, np.array([1.0, 1.0]), 1.0)
        with pytest.raises(ValueError):
            GmmPrior(np.array([0.5, 0.5]), means, np.array([1.0, -1.0]), 1.0)


class TestTweedie:
    def test_zero_eps_model(self, schedule, rng):
        grid = ImageGrid.zeros(3, 3, 1.0)
        model = ZeroModel(grid)
        x_t = rng.standard_normal((3, 3))
        t = 250
        out = tweedie_x0(x_t, t, model, schedule)
        np.testing.assert_allclose(
            out, x_t / np.sqrt(schedule.alpha_bar(t)), rtol=1e-15
        )

    def test_equals_conditional_gaussian_mean(self, schedule, rng):
        mu = ImageGrid.from_array(rng.standard_normal((3, 3)), 1.0)
        var = rng.uniform(0.2, 2.0, (3, 3))
        prior = GaussianPrior(mu, var)
        x_t = rng.standard_normal((3, 3))
        for t in (1, 77, 500, 1000):
            ab = schedule.alpha_bar(t)
            cond = (np.sqrt(ab) * var * x_t + (1 - ab) * mu.data) / (ab * var + 1 - ab)
            np.testing.assert_allclose(
                tweedie_x0(x_t, t, prior, schedule), cond, rtol=1e-12
            )

    def test_scalar_shrinkage_factor(self, half_schedule):
        # sigma0^2 = 1, abar = 1/2, mu = 0: x0_hat = sqrt(1/2) * x_t.
        prior = GaussianPrior(ImageGrid.zeros(2, 2, 1.0), 1.0)
        x_t = np.full((2, 2), 3.0)
        out = tweedie_x0(x_t, 2, prior, half_schedule)
        np.testing.assert_allclose(out, np.sqrt(0.5) * x_t, rtol=1e-12)

    def test_against_monte_carlo_posterior_mean(self, schedule):
        rng = np.random.default_rng(17)
        mu = ImageGrid.from_array(0.2 * rng.standard_normal((2, 2)), 1.0)
        prior = GaussianPrior(mu, np.full((2, 2), 0.6))
        t = 600
        x_t = 0.4 + np.sqrt(schedule.alpha_bar(t)) * mu.data
        _, post_mean_mc, ess = mc_score(prior, x_t, t, schedule, seed=5)
        assert ess > 1000
        out = tweedie_x0(x_t, t, prior, schedule)
        np.testing.assert_allclose(out, post_mean_mc, rtol=0.02)


class TestPosteriorMeanJvp:
    def test_gaussian_scalar_multiple(self, half_schedule, rng):
        prior = GaussianPrior(ImageGrid.zeros(2, 2, 1.0), 1.0)
        v = rng.standard_normal((2, 2))
        out = posterior_mean_jvp(np.zeros((2, 2)), 2, prior, half_schedule, v)
        np.testing.assert_allclose(out, np.sqrt(0.5) * v, rtol=1e-12)

    def test_zero_direction(self, schedule, rng):
        prior = GaussianPrior(ImageGrid.zeros(2, 2, 1.0), 0.5)
        out = posterior_mean_jvp(
            rng.standard_normal((2, 2)), 100, prior, schedule, np.zeros((2, 2))
        )
        np.testing.assert_array_equal(out, 0.0)

    def test_against_finite_differences(self, schedule, rng):
        means = np.stack([rng.standard_normal((2, 4)) for _ in range(3)])
        gmm = GmmPrior(np.array([0.3, 0.3, 0.4]), means, np.array([0.5, 1.0, 1.5]), 1.0)
        x_t = rng.standard_normal((2, 4))
        v = rng.standard_normal((2, 4))
        h = 1e-6
        for t in (30, 300, 950):
            jv = posterior_mean_jvp(x_t, t, gmm, schedule, v)
            fd = (
                tweedie_x0(x_t + h * v, t, gmm, schedule)
                - tweedie_x0(x_t - h * v, t, gmm, schedule)
            ) / (2 * h)
            np.testing.assert_allclose(jv, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())

    def test_capability_error_without_jvp(self, schedule):
        model = ZeroModel(ImageGrid.zeros(2, 2, 1.0))
        with pytest.raises(JvpUnavailableError):
            posterior_mean_jvp(np.zeros((2, 2)), 10, model, schedule, np.ones((2, 2)))


class TestJacobianApproximationCheck:
    def test_gaussian_closed_form(self, schedule, rng):
        sigma0_sq = 0.8
        prior = GaussianPrior(ImageGrid.zeros(4, 4, 1.0), sigma0_sq)
        t = 200
        ab = schedule.alpha_bar(t)
        seg = np.arange(6)
        chk = jacobian_approximation_check(
            prior, rng.standard_normal((4, 4)), t, schedule, seg
        )
        expected = (1 - ab) / (ab * sigma0_sq + 1 - ab)
        np.testing.assert_allclose(chk.matrix, expected * np.eye(6), atol=1e-15)
        assert chk.off_diagonal_energy_fraction == 0.0
        assert chk.max_diagonal_deviation == pytest.approx(abs(expected - 1), rel=1e-12)

    @pytest.mark.parametrize("sigma0_sq", [0.1, 0.5, 1.0])
    def test_near_identity_at_final_step(self, schedule, rng, sigma0_sq):
        prior = GaussianPrior(ImageGrid.zeros(4, 4, 1.0), sigma0_sq)
        chk = jacobian_approximation_check(
            prior, rng.standard_normal((4, 4)), 1000, schedule, np.arange(8)
        )
        assert chk.max_diagonal_deviation < 0.01
        assert chk.off_diagonal_energy_fraction < 1e-12

    def test_monotone_approach_to_identity(self, schedule, rng):
        prior = GaussianPrior(ImageGrid.zeros(4, 4, 1.0), 0.7)
        x_t = rng.standard_normal((4, 4))
        devs = [
            jacobian_approximation_check(
                prior, x_t, t, schedule, np.arange(4)
            ).max_diagonal_deviation
            for t in (100, 250, 500, 1000)
        ]
        assert np.all(np.diff(devs) < 0)

    def test_gmm_far_from_boundary_matches_component(self, schedule):
        m = 5.0 * np.ones((3, 3))
        gmm = GmmPrior(np.array([0.5, 0.5]), np.stack([m, -m]), np.array([0.6, 0.6]), 1.0)
        gauss = GaussianPrior(ImageGrid.from_array(m, 1.0), 0.6)
        t = 20
        x_t = np.sqrt(schedule.alpha_bar(t)) * m
        seg = np.arange(5)
        chk_gmm = jacobian_approximation_check(gmm, x_t, t, schedule, seg)
        chk_gauss = jacobian_approximation_check(gauss, x_t, t, schedule, seg)
        np.testing.assert_allclose(chk_gmm.matrix, chk_gauss.matrix, atol=1e-8)

    def test_segment_size_limit(self, schedule):
        prior = GaussianPrior(ImageGrid.zeros(10, 10, 1.0), 1.0)
        with pytest.raises(ValueError):
            jacobian_approximation_check(
                prior, np.zeros((10, 10)), 10, schedule, np.arange(65)
            )
        out = jacobian_approximation_check(
            prior, np.zeros((10, 10)), 10, schedule, np.arange(64)
        )
        assert isinstance(out, ScaledJacobianBlock)
        assert out.matrix.shape == (64, 64)
