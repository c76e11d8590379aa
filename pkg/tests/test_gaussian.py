"""Gaussian algebra: densities, divergences, sampling, mixtures, moments."""

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

import unlearn_forge as uf
from unlearn_forge.gaussian import (
    log_pdf_batch,
    mixture_log_pdf,
    mixture_log_pdf_batch,
    mixture_mean_cov,
    sample_mixture,
)

from helpers import quadrature_kl_1d, random_gaussian


class TestLogPdf:
    def test_standard_normal_at_origin(self):
        dist = uf.GaussianDist.standard(1)
        assert uf.log_pdf(dist, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_unit_shift(self):
        dist = uf.GaussianDist.standard(1)
        expected = -0.5 * math.log(2 * math.pi) - 0.5
        assert uf.log_pdf(dist, [1.0]) == pytest.approx(expected, abs=1e-12)

    def test_matches_scipy_on_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            d = int(rng.integers(1, 5))
            dist = random_gaussian(rng, d)
            points = rng.standard_normal((6, d)) * 2.0
            reference = multivariate_normal(dist.mean, dist.cov).logpdf(points)
            np.testing.assert_allclose(log_pdf_batch(dist, points), reference, atol=1e-10)

    def test_mode_is_the_mean(self):
        rng = np.random.default_rng(7)
        dist = random_gaussian(rng, 3)
        at_mean = uf.log_pdf(dist, dist.mean)
        for _ in range(100):
            offset = rng.standard_normal(3) * rng.uniform(0.01, 5.0)
            assert uf.log_pdf(dist, dist.mean + offset) < at_mean

    def test_dimension_mismatch(self):
        with pytest.raises(uf.ShapeError):
            uf.log_pdf(uf.GaussianDist.standard(2), [0.0])


class TestValidation:
    def test_rejects_non_triangular_factor(self):
        with pytest.raises(uf.ConfigError):
            uf.GaussianDist(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_non_positive_diagonal(self):
        with pytest.raises(uf.ConfigError):
            uf.GaussianDist(np.zeros(1), np.array([[0.0]]))

    def test_from_cov_requires_positive_definite(self):
        with pytest.raises(uf.FactorizationError):
            uf.GaussianDist.from_cov(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestKlGaussian:
    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            dist = random_gaussian(rng, int(rng.integers(1, 5)))
            assert abs(uf.kl_gaussian(dist, dist)) <= 1e-12

    def test_scalar_mean_shift(self):
        p = uf.GaussianDist(np.array([1.0]), np.array([[1.0]]))
        q = uf.GaussianDist.standard(1)
        assert uf.kl_gaussian(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_scalar_variance_ratio(self):
        p = uf.GaussianDist.from_cov(np.zeros(1), np.array([[2.0]]))
        q = uf.GaussianDist.standard(1)
        expected = 0.5 * (2.0 - 1.0 - math.log(2.0))
        assert uf.kl_gaussian(p, q) == pytest.approx(expected, abs=1e-12)

    def test_non_negative_and_zero_only_at_equality(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            d = int(rng.integers(1, 4))
            p = random_gaussian(rng, d)
            q = random_gaussian(rng, d)
            value = uf.kl_gaussian(p, q)
            assert value >= 0.0
            assert value > 1e-10  # distinct random draws never coincide

    def test_agrees_with_quadrature_in_1d(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = random_gaussian(rng, 1)
            q = random_gaussian(rng, 1)
            oracle = quadrature_kl_1d(
                lambda w: uf.log_pdf(p, [w]),
                lambda w: uf.log_pdf(q, [w]),
                float(p.mean[0]) - 14.0,
                float(p.mean[0]) + 14.0,
            )
            assert uf.kl_gaussian(p, q) == pytest.approx(oracle, abs=1e-6)


class TestSample:
    def test_deterministic_per_seed(self):
        dist = uf.GaussianDist.standard(3)
        np.testing.assert_array_equal(uf.sample(dist, 17, 99), uf.sample(dist, 17, 99))

    def test_law_of_large_numbers(self):
        dist = uf.GaussianDist.standard(1)
        draws = uf.sample(dist, 100000, 1)
        stderr = 1.0 / math.sqrt(100000)
        assert abs(float(draws.mean())) <= 3 * stderr

    def test_empirical_covariance_matches(self):
        factor = np.array([[1.0, 0.0], [0.8, 0.6]])
        dist = uf.GaussianDist(np.array([1.0, -2.0]), factor)
        draws = uf.sample(dist, 200000, 2)
        emp = np.cov(draws.T)
        # entrywise tolerance ~ 3 * sqrt(2/n) * scale
        np.testing.assert_allclose(emp, dist.cov, atol=0.02)


class TestMixture:
    def test_weights_must_sum_to_one(self):
        comp = uf.GaussianDist.standard(1)
        with pytest.raises(uf.ConfigError):
            uf.GaussianMixture(np.array([0.6, 0.5]), (comp, comp))

    def test_log_pdf_stable_far_from_means(self):
        mix = uf.GaussianMixture.uniform(
            (uf.GaussianDist.standard(1),
             uf.GaussianDist(np.array([3.0]), np.array([[2.0]]))),
        )
        for scale in (10.0, 25.0, 50.0):
            value = mixture_log_pdf(mix, [scale])
            assert math.isfinite(value)

    def test_zero_weight_component_ignored(self):
        near = uf.GaussianDist.standard(1)
        far = uf.GaussianDist(np.array([500.0]), np.array([[1.0]]))
        mix = uf.GaussianMixture(np.array([1.0, 0.0]), (near, far))
        assert mixture_log_pdf(mix, [0.0]) == pytest.approx(uf.log_pdf(near, [0.0]), abs=1e-12)

    def test_sample_mixture_deterministic(self):
        mix = uf.GaussianMixture.uniform(
            (uf.GaussianDist.standard(2),
             uf.GaussianDist(np.array([4.0, 4.0]), np.eye(2))),
        )
        np.testing.assert_array_equal(sample_mixture(mix, 64, 3), sample_mixture(mix, 64, 3))


class TestKlMixtureMc:
    def test_identical_single_component_mixtures(self):
        dist = uf.GaussianDist(np.array([0.3]), np.array([[1.2]]))
        estimate, stderr = uf.kl_mixture_mc(
            uf.GaussianMixture.single(dist), uf.GaussianMixture.single(dist), 500, 0
        )
        assert estimate == 0.0 and stderr == 0.0

    def test_single_components_match_closed_form(self):
        rng = np.random.default_rng(21)
        for seed in range(5):
            p = random_gaussian(rng, 2)
            q = random_gaussian(rng, 2)
            estimate, stderr = uf.kl_mixture_mc(
                uf.GaussianMixture.single(p), uf.GaussianMixture.single(q), 20000, seed
            )
            assert abs(estimate - uf.kl_gaussian(p, q)) <= 3 * stderr

    def test_bimodal_vs_moment_matched_gaussian(self):
        components = (
            uf.GaussianDist(np.array([-1.0]), np.array([[0.5]])),
            uf.GaussianDist(np.array([1.0]), np.array([[0.5]])),
        )
        mix = uf.GaussianMixture.uniform(components)
        surrogate = uf.moment_match(mix)
        estimate, stderr = uf.kl_mixture_mc(
            mix, uf.GaussianMixture.single(surrogate), 40000, 4
        )
        assert estimate - 3 * stderr > 0.0
        oracle = quadrature_kl_1d(
            lambda w: mixture_log_pdf(mix, [w]),
            lambda w: uf.log_pdf(surrogate, [w]),
            -16.0,
            16.0,
        )
        assert abs(estimate - oracle) <= 3 * stderr

    def test_vanishing_density_reports_infinity(self):
        p = uf.GaussianMixture.single(uf.GaussianDist(np.array([0.0]), np.array([[1.0]])))
        q = uf.GaussianMixture.single(
            uf.GaussianDist(np.array([1e200]), np.array([[1e-3]]))
        )
        estimate, stderr = uf.kl_mixture_mc(p, q, 200, 0)
        assert math.isinf(estimate)

    def test_requires_enough_samples(self):
        p = uf.GaussianMixture.single(uf.GaussianDist.standard(1))
        with pytest.raises(uf.ConfigError):
            uf.kl_mixture_mc(p, p, 99, 0)


class TestMomentMatch:
    def test_single_component_is_identity(self):
        rng = np.random.default_rng(9)
        dist = random_gaussian(rng, 3)
        matched = uf.moment_match(uf.GaussianMixture.single(dist))
        np.testing.assert_allclose(matched.mean, dist.mean, atol=1e-14)
        np.testing.assert_allclose(matched.cov, dist.cov, atol=1e-14)

    def test_symmetric_bimodal_hand_formula(self):
        mix = uf.GaussianMixture.uniform(
            (uf.GaussianDist(np.array([-1.0]), np.array([[1.0]])),
             uf.GaussianDist(np.array([1.0]), np.array([[1.0]]))),
        )
        matched = uf.moment_match(mix)
        # total variance = mean of variances + variance of means = 1 + 1
        assert matched.mean[0] == pytest.approx(0.0, abs=1e-14)
        assert matched.cov[0, 0] == pytest.approx(2.0, abs=1e-14)

    def test_degenerate_weights_select_component(self):
        first = uf.GaussianDist(np.array([2.0]), np.array([[0.7]]))
        second = uf.GaussianDist(np.array([-9.0]), np.array([[3.0]]))
        matched = uf.moment_match(uf.GaussianMixture(np.array([1.0, 0.0]), (first, second)))
        np.testing.assert_allclose(matched.mean, first.mean, atol=1e-14)
        np.testing.assert_allclose(matched.cov, first.cov, atol=1e-14)

    def test_first_two_moments_preserved_exactly(self):
        rng = np.random.default_rng(31)
        components = tuple(random_gaussian(rng, 2) for _ in range(4))
        weights = rng.uniform(0.1, 1.0, 4)
        weights /= weights.sum()
        mix = uf.GaussianMixture(weights, components)
        matched = uf.moment_match(mix)
        # recompute the mixture moments from first principles
        mean = sum(w * c.mean for w, c in zip(weights, components))
        cov = sum(
            w * (c.cov + np.outer(c.mean - mean, c.mean - mean))
            for w, c in zip(weights, components)
        )
        np.testing.assert_allclose(matched.mean, mean, atol=1e-12)
        np.testing.assert_allclose(matched.cov, cov, atol=1e-12)


class TestJsonRoundTrip:
    def test_exact_round_trip(self):
        rng = np.random.default_rng(13)
        dist = random_gaussian(rng, 3)
        restored = uf.GaussianDist.from_json_dict(dist.to_json_dict())
        np.testing.assert_array_equal(restored.mean, dist.mean)
        np.testing.assert_array_equal(restored.cov_factor, dist.cov_factor)


class TestQuadratic:
    def test_expectation_matches_monte_carlo(self):
        rng = np.random.default_rng(17)
        dist = random_gaussian(rng, 3)
        matrix = rng.standard_normal((3, 3))
        quad = uf.Quadratic(matrix + matrix.T, rng.standard_normal(3), 0.7)
        draws = uf.sample(dist, 200000, 8)
        values = quad.value_batch(draws)
        stderr = values.std(ddof=1) / math.sqrt(len(values))
        assert abs(quad.expectation(dist) - values.mean()) <= 3 * stderr

    def test_value_batch_matches_value(self):
        rng = np.random.default_rng(19)
        quad = uf.Quadratic(np.eye(2) * 2.0, np.array([1.0, -1.0]), 0.25)
        points = rng.standard_normal((5, 2))
        np.testing.assert_allclose(
            quad.value_batch(points), [quad.value(p) for p in points], atol=1e-12
        )
