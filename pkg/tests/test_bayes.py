"""Conjugate learning, exact downdating, likelihood algebra, statistics."""

import math

import numpy as np
import pytest

import unlearn_forge as uf
from unlearn_forge.bayes import likelihood_quadratic

from helpers import grid_posterior_1d, grid_gibbs_1d, natural_params_gap, random_instance


def scalar_model(prior_mean=0.0, prior_var=1.0, noise_var=1.0):
    prior = uf.GaussianDist.from_cov(np.array([prior_mean]), np.array([[prior_var]]))
    return uf.ConjugateModel(prior, noise_var, uf.GAUSSIAN_MEAN)


class TestExactPosterior:
    def test_single_observation_against_grid_oracle(self):
        model = scalar_model()
        posterior = uf.exact_posterior(model, uf.Dataset(np.array([[2.0]])))
        mean, var = grid_posterior_1d(0.0, 1.0, 1.0, [2.0])
        assert posterior.mean[0] == pytest.approx(mean, abs=1e-6)
        assert posterior.cov[0, 0] == pytest.approx(var, abs=1e-6)
        assert posterior.mean[0] == pytest.approx(1.0, abs=1e-12)
        assert posterior.cov[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_two_observations_against_grid_oracle(self):
        model = scalar_model()
        posterior = uf.exact_posterior(model, uf.Dataset(np.array([[2.0], [4.0]])))
        mean, var = grid_posterior_1d(0.0, 1.0, 1.0, [2.0, 4.0])
        assert posterior.mean[0] == pytest.approx(mean, abs=1e-6)
        assert posterior.cov[0, 0] == pytest.approx(var, abs=1e-6)

    def test_regression_against_grid_oracle(self):
        prior = uf.GaussianDist.standard(1)
        model = uf.ConjugateModel(prior, 0.5, uf.LINEAR_REGRESSION)
        data = uf.Dataset(np.array([[1.0, 0.9], [2.0, 2.3], [-1.0, -0.7]]))
        posterior = uf.exact_posterior(model, data)
        mean, var = grid_posterior_1d(
            0.0, 1.0, 0.5, data.points[:, 1], features=data.points[:, 0]
        )
        assert posterior.mean[0] == pytest.approx(mean, abs=1e-6)
        assert posterior.cov[0, 0] == pytest.approx(var, abs=1e-6)

    def test_prior_is_an_explicit_accessor(self):
        model = scalar_model()
        with pytest.raises(uf.ShapeError):
            uf.Dataset(np.zeros((0, 1)))
        assert model.prior.mean[0] == 0.0

    def test_data_dimension_checked(self):
        model = scalar_model()
        with pytest.raises(uf.ShapeError):
            uf.exact_posterior(model, uf.Dataset(np.zeros((3, 2))))


class TestDowndatePosterior:
    def test_erasing_one_point_matches_retraining(self):
        model = scalar_model()
        data = uf.Dataset(np.array([[2.0], [4.0]]))
        nat = uf.posterior_natural(model, data)
        downdated = uf.downdate_posterior(nat, model, uf.Dataset(np.array([[4.0]])))
        retrained = uf.exact_posterior(model, uf.Dataset(np.array([[2.0]])))
        assert natural_params_gap(downdated, retrained) < 1e-12
        mean, var = grid_posterior_1d(0.0, 1.0, 1.0, [2.0])
        assert downdated.mean[0] == pytest.approx(mean, abs=1e-6)
        assert downdated.cov[0, 0] == pytest.approx(var, abs=1e-6)

    def test_erasing_nothing_round_trips(self):
        model = scalar_model()
        data = uf.Dataset(np.array([[2.0], [4.0]]))
        nat = uf.posterior_natural(model, data)
        unchanged = uf.downdate_posterior(nat, model, None)
        posterior = uf.exact_posterior(model, data)
        assert natural_params_gap(unchanged, posterior) < 1e-10

    def test_erasing_everything_recovers_the_prior(self):
        model = scalar_model(prior_mean=0.3, prior_var=0.8)
        data = uf.Dataset(np.array([[2.0], [4.0], [-1.0]]))
        nat = uf.posterior_natural(model, data)
        recovered = uf.downdate_posterior(nat, model, data)
        assert natural_params_gap(recovered, model.prior) < 1e-10

    def test_over_erasing_raises(self):
        model = scalar_model()
        data = uf.Dataset(np.array([[2.0]]))
        nat = uf.posterior_natural(model, data)
        too_much = uf.Dataset(np.array([[2.0], [2.0], [2.0]]))
        with pytest.raises(uf.DowndateError):
            uf.downdate_posterior(nat, model, too_much)

    def test_retraining_consistency_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            model, _, data, request = random_instance(rng)
            erased, remaining = uf.split_dataset(data, request)
            nat = uf.posterior_natural(model, data)
            downdated = uf.downdate_posterior(nat, model, erased)
            retrained = uf.exact_posterior(model, remaining)
            assert natural_params_gap(downdated, retrained) < 1e-10


class TestSubsetLikelihood:
    def test_point_at_parameter(self):
        model = scalar_model()
        value = uf.log_lik_subset([2.0], uf.Dataset(np.array([[2.0]])), model)
        assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_quadratic_penalty(self):
        model = scalar_model()
        value = uf.log_lik_subset([0.0], uf.Dataset(np.array([[2.0]])), model)
        assert value == pytest.approx(-0.5 * math.log(2 * math.pi) - 2.0, abs=1e-12)

    def test_additivity_over_points(self):
        model = scalar_model()
        single = uf.log_lik_subset([0.7], uf.Dataset(np.array([[2.0]])), model)
        double = uf.log_lik_subset([0.7], uf.Dataset(np.array([[2.0], [2.0]])), model)
        assert double == pytest.approx(2 * single, abs=1e-12)


class TestExpectedLogLik:
    def test_narrow_distribution_collapses_to_point_value(self):
        model = scalar_model()
        erased = uf.Dataset(np.array([[1.3]]))
        w = np.array([0.2])
        narrow = uf.GaussianDist(w, np.array([[1e-7]]))
        assert uf.expected_log_lik(narrow, erased, model) == pytest.approx(
            uf.log_lik_subset(w, erased, model), abs=1e-6
        )

    def test_standard_normal_at_origin(self):
        model = scalar_model()
        q = uf.GaussianDist.standard(1)
        value = uf.expected_log_lik(q, uf.Dataset(np.array([[0.0]])), model)
        assert value == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-12)

    def test_additivity_over_datasets(self):
        rng = np.random.default_rng(3)
        model = scalar_model()
        q = uf.GaussianDist(np.array([0.4]), np.array([[0.6]]))
        first = uf.Dataset(rng.standard_normal((3, 1)))
        second = uf.Dataset(rng.standard_normal((2, 1)))
        union = uf.Dataset(np.vstack([first.points, second.points]))
        assert uf.expected_log_lik(q, union, model) == pytest.approx(
            uf.expected_log_lik(q, first, model) + uf.expected_log_lik(q, second, model),
            abs=1e-12,
        )

    def test_matches_monte_carlo_on_random_instances(self):
        rng = np.random.default_rng(4)
        for seed in range(50):
            model, _, data, request = random_instance(rng, d_max=3, n_max=12)
            erased, _ = uf.split_dataset(data, request)
            q = uf.GaussianDist(
                rng.standard_normal(model.param_dim) * 0.5,
                np.diag(rng.uniform(0.3, 1.0, model.param_dim)),
            )
            draws = uf.sample(q, 200000, seed)
            values = likelihood_quadratic(model, erased).value_batch(draws)
            stderr = values.std(ddof=1) / math.sqrt(len(values))
            assert abs(uf.expected_log_lik(q, erased, model) - values.mean()) <= 3 * stderr


class TestStatistics:
    def test_full_posterior_natural_parameters(self):
        model = scalar_model()
        data = uf.Dataset(np.array([[2.0], [4.0]]))
        stat = uf.make_statistic(model, data, uf.STAT_FULL_POSTERIOR)
        assert stat.payload.precision[0, 0] == pytest.approx(3.0, abs=1e-12)
        assert stat.payload.shift[0] == pytest.approx(6.0, abs=1e-12)

    def test_summary_mean_and_trace(self):
        model = scalar_model()
        data = uf.Dataset(np.array([[2.0], [4.0]]))
        stat = uf.make_statistic(model, data, uf.STAT_SUMMARY)
        mean, trace = stat.payload
        assert mean[0] == pytest.approx(2.0, abs=1e-12)
        assert trace == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        model = uf.ConjugateModel(uf.GaussianDist.standard(2), 0.7, uf.GAUSSIAN_MEAN)
        points = rng.standard_normal((9, 2))
        stat = uf.make_statistic(model, uf.Dataset(points), uf.STAT_FULL_POSTERIOR)
        shuffled = uf.make_statistic(
            model, uf.Dataset(points[rng.permutation(9)]), uf.STAT_FULL_POSTERIOR
        )
        np.testing.assert_allclose(stat.payload.precision, shuffled.payload.precision, atol=1e-10)
        np.testing.assert_allclose(stat.payload.shift, shuffled.payload.shift, atol=1e-10)

    def test_unknown_level_rejected(self):
        model = scalar_model()
        with pytest.raises(uf.ConfigError):
            uf.make_statistic(model, uf.Dataset(np.array([[1.0]])), "raw-data")


class TestNaturalParams:
    def test_round_trip_within_tolerance(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            model, _, data, _ = random_instance(rng, d_max=4, n_max=20)
            posterior = uf.exact_posterior(model, data)
            back = uf.NaturalParams.from_gaussian(posterior).to_gaussian()
            assert np.max(np.abs(back.mean - posterior.mean)) < 1e-10
            assert np.max(np.abs(back.cov - posterior.cov)) < 1e-10


class TestBayesFactorization:
    def test_posterior_ratio_equals_subset_likelihood_up_to_constant(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            model, _, data, request = random_instance(rng, d_max=3, n_max=15)
            erased, remaining = uf.split_dataset(data, request)
            full = uf.exact_posterior(model, data)
            rest = uf.exact_posterior(model, remaining)
            offsets = []
            for _ in range(100):
                w = rng.standard_normal(model.param_dim) * 2.0
                offsets.append(
                    uf.log_pdf(full, w)
                    - uf.log_pdf(rest, w)
                    - uf.log_lik_subset(w, erased, model)
                )
            assert np.std(offsets) < 1e-8


class TestTemperedPosterior:
    def test_gaussian_log_loss_at_beta_n_recovers_the_posterior(self):
        rng = np.random.default_rng(8)
        model, _, data, _ = random_instance(rng, d_max=3, n_max=15)
        tempered = uf.tempered_posterior(model, data, uf.LossKind.GAUSSIAN_NLL, float(data.n))
        posterior = uf.exact_posterior(model, data)
        assert natural_params_gap(tempered, posterior) < 1e-10

    def test_squared_error_matches_grid_oracle(self):
        model = scalar_model(prior_mean=0.2, prior_var=1.5, noise_var=0.9)
        data = uf.Dataset(np.array([[1.0], [2.5], [-0.5]]))
        beta = 0.7
        tempered = uf.tempered_posterior(model, data, uf.LossKind.SQUARED_ERROR, beta)

        def neg_energy(grid):
            losses = sum((z - grid) ** 2 for z in data.points[:, 0]) / data.n
            return -beta * losses

        mean, var = grid_gibbs_1d(0.2, 1.5, neg_energy)
        assert tempered.mean[0] == pytest.approx(mean, abs=1e-6)
        assert tempered.cov[0, 0] == pytest.approx(var, abs=1e-6)
