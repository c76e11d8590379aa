"""Datasets, losses, population quantities, and delete requests."""

import math

import numpy as np
import pytest
from scipy.stats import chisquare

import unlearn_forge as uf
from unlearn_forge.core import _population_loss_mc, point_losses

from helpers import random_gaussian


def scalar_mean_spec(mean=0.0, variance=1.0):
    return uf.PopulationSpec(uf.GAUSSIAN_MEAN, np.array([mean]), variance)


class TestGenerateDataset:
    def test_shape_and_determinism(self):
        spec = scalar_mean_spec()
        data = uf.generate_dataset(spec, 3, 7)
        assert data.points.shape == (3, 1)
        again = uf.generate_dataset(spec, 3, 7)
        np.testing.assert_array_equal(data.points, again.points)

    def test_regression_rows_are_features_then_target(self):
        rng = np.random.default_rng(1)
        features = random_gaussian(rng, 2)
        spec = uf.PopulationSpec(
            uf.LINEAR_REGRESSION, np.array([1.0, -2.0]), 0.5, features
        )
        data = uf.generate_dataset(spec, 10, 3)
        assert data.points.shape == (10, 3)

    def test_zero_points_rejected(self):
        with pytest.raises(uf.ConfigError):
            uf.generate_dataset(scalar_mean_spec(), 0, 1)

    def test_invalid_noise_variance_rejected(self):
        with pytest.raises(uf.ConfigError):
            uf.PopulationSpec(uf.GAUSSIAN_MEAN, np.array([0.0]), -1.0)


class TestTrainingLoss:
    def test_squared_error_two_points(self):
        data = uf.Dataset(np.array([[2.0], [4.0]]))
        assert uf.training_loss([1.0], data, uf.LossKind.SQUARED_ERROR) == pytest.approx(5.0)

    def test_zero_at_the_data_point(self):
        data = uf.Dataset(np.array([[3.25]]))
        assert uf.training_loss([3.25], data, uf.LossKind.SQUARED_ERROR) == 0.0

    def test_gaussian_log_loss_value(self):
        data = uf.Dataset(np.array([[0.0]]))
        value = uf.training_loss([0.0], data, uf.LossKind.GAUSSIAN_NLL, noise_variance=1.0)
        assert value == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_gaussian_log_loss_needs_noise_variance(self):
        data = uf.Dataset(np.array([[0.0]]))
        with pytest.raises(uf.ConfigError):
            uf.training_loss([0.0], data, uf.LossKind.GAUSSIAN_NLL)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        points = rng.standard_normal((12, 3))
        w = rng.standard_normal(3)
        shuffled = points[rng.permutation(12)]
        assert uf.training_loss(w, uf.Dataset(points), uf.LossKind.SQUARED_ERROR) == pytest.approx(
            uf.training_loss(w, uf.Dataset(shuffled), uf.LossKind.SQUARED_ERROR), abs=1e-12
        )

    def test_midpoint_convexity_in_the_parameter(self):
        rng = np.random.default_rng(3)
        data = uf.Dataset(rng.standard_normal((8, 2)))
        for _ in range(50):
            a, b = rng.standard_normal(2), rng.standard_normal(2)
            mid = uf.training_loss(0.5 * (a + b), data, uf.LossKind.SQUARED_ERROR)
            avg = 0.5 * (
                uf.training_loss(a, data, uf.LossKind.SQUARED_ERROR)
                + uf.training_loss(b, data, uf.LossKind.SQUARED_ERROR)
            )
            assert mid <= avg + 1e-12

    def test_dimension_mismatch(self):
        data = uf.Dataset(np.zeros((3, 4)))
        with pytest.raises(uf.ShapeError):
            uf.training_loss([0.0, 0.0], data, uf.LossKind.SQUARED_ERROR)


class TestPopulationLoss:
    def test_variance_at_true_mean(self):
        # independent brute-force oracle for E (w - Z)^2
        spec = scalar_mean_spec()
        draws = uf.generate_dataset(spec, 10**6, 123).points[:, 0]
        for w, expected in ((0.0, 1.0), (2.0, 5.0)):
            closed = uf.population_loss([w], spec, uf.LossKind.SQUARED_ERROR)
            assert closed == pytest.approx(expected, abs=1e-12)
            oracle = np.mean((w - draws) ** 2)
            stderr = np.std((w - draws) ** 2, ddof=1) / 1000.0
            assert abs(closed - oracle) <= 3 * stderr

    def test_monte_carlo_matches_closed_form(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            d = int(rng.integers(1, 4))
            spec = uf.PopulationSpec(
                uf.GAUSSIAN_MEAN, rng.standard_normal(d), float(rng.uniform(0.5, 2.0))
            )
            w = rng.standard_normal(d)
            loss = uf.LossKind.SQUARED_ERROR if trial % 2 else uf.LossKind.GAUSSIAN_NLL
            closed = uf.population_loss(w, spec, loss)
            estimate, stderr = _population_loss_mc(w, spec, loss, 20000, trial)
            assert abs(closed - estimate) <= 3 * stderr + 1e-9

    def test_regression_closed_form_matches_monte_carlo(self):
        rng = np.random.default_rng(14)
        features = random_gaussian(rng, 2)
        spec = uf.PopulationSpec(uf.LINEAR_REGRESSION, np.array([0.7, -0.2]), 0.8, features)
        w = np.array([0.1, 0.4])
        closed = uf.population_loss(w, spec, uf.LossKind.SQUARED_ERROR)
        estimate, stderr = _population_loss_mc(w, spec, uf.LossKind.SQUARED_ERROR, 200000, 0)
        assert abs(closed - estimate) <= 3 * stderr

    def test_monte_carlo_mode_via_public_interface(self):
        spec = scalar_mean_spec()
        value = uf.population_loss(
            [0.0], spec, uf.LossKind.SQUARED_ERROR, mode="monte-carlo", n_mc=100000, seed=5
        )
        assert value == pytest.approx(1.0, abs=0.05)

    def test_unknown_mode_rejected(self):
        with pytest.raises(uf.ConfigError):
            uf.population_loss([0.0], scalar_mean_spec(), uf.LossKind.SQUARED_ERROR, mode="exact")


class TestGeneralizationError:
    def test_narrow_posterior_reduces_to_loss_gap(self):
        spec = scalar_mean_spec()
        data = uf.generate_dataset(spec, 10, 6)
        w = np.array([0.4])
        posterior = uf.GaussianDist(w, np.array([[1e-8]]))
        estimate, stderr = uf.generalization_error(
            posterior, data, spec, uf.LossKind.SQUARED_ERROR, 2000, 0
        )
        gap = uf.population_loss(w, spec, uf.LossKind.SQUARED_ERROR) - uf.training_loss(
            w, data, uf.LossKind.SQUARED_ERROR
        )
        assert abs(estimate - gap) <= 3 * stderr + 1e-9

    def test_shrinks_with_more_data(self):
        spec = scalar_mean_spec()
        prior = uf.GaussianDist.standard(1)
        model = uf.ConjugateModel(prior, 1.0, uf.GAUSSIAN_MEAN)
        magnitudes = []
        for n in (10, 100, 1000):
            data = uf.generate_dataset(spec, n, 60 + n)
            posterior = uf.exact_posterior(model, data)
            estimate, _ = uf.generalization_error(
                posterior, data, spec, uf.LossKind.SQUARED_ERROR, 40000, n
            )
            magnitudes.append(abs(estimate))
        assert magnitudes[0] > magnitudes[1] > magnitudes[2]

    def test_matched_population_and_sample_gives_zero(self):
        # two points at mean +/- sigma make the training loss equal the
        # population loss for every parameter value
        spec = scalar_mean_spec(mean=0.5, variance=2.0)
        sigma = math.sqrt(2.0)
        data = uf.Dataset(np.array([[0.5 - sigma], [0.5 + sigma]]))
        posterior = uf.GaussianDist(np.array([0.1]), np.array([[0.8]]))
        estimate, stderr = uf.generalization_error(
            posterior, data, spec, uf.LossKind.SQUARED_ERROR, 500, 1
        )
        assert estimate == pytest.approx(0.0, abs=1e-10)
        assert stderr == pytest.approx(0.0, abs=1e-10)


class TestDeleteRequests:
    def test_cannot_erase_everything(self):
        data = uf.Dataset(np.zeros((5, 1)))
        with pytest.raises(uf.ConfigError):
            uf.draw_delete_request(data, 5, 0)

    def test_deterministic_per_seed(self):
        data = uf.Dataset(np.arange(20.0)[:, None])
        assert uf.draw_delete_request(data, 4, 11) == uf.draw_delete_request(data, 4, 11)

    def test_single_point_frequencies(self):
        data = uf.Dataset(np.array([[0.0], [1.0]]))
        hits = sum(
            uf.draw_delete_request(data, 1, seed).erase_indices[0] for seed in range(10000)
        )
        stderr = math.sqrt(0.25 / 10000)
        assert abs(hits / 10000 - 0.5) <= 3 * stderr

    def test_subsets_uniform_chi_square(self):
        from itertools import combinations

        for n, m in ((3, 1), (4, 2), (5, 2), (6, 2)):
            data = uf.Dataset(np.arange(float(n))[:, None])
            support = list(combinations(range(n), m))
            index = {subset: k for k, subset in enumerate(support)}
            counts = np.zeros(len(support))
            trials = 400 * len(support)
            for seed in range(trials):
                request = uf.draw_delete_request(data, m, 100000 + seed)
                counts[index[request.erase_indices]] += 1
            _, p_value = chisquare(counts)
            assert p_value > 0.001, f"n={n} m={m} p={p_value}"

    def test_split_dataset_partitions(self):
        data = uf.Dataset(np.arange(6.0)[:, None])
        request = uf.DeleteRequest((1, 4))
        erased, remaining = uf.split_dataset(data, request)
        np.testing.assert_array_equal(erased.points[:, 0], [1.0, 4.0])
        np.testing.assert_array_equal(remaining.points[:, 0], [0.0, 2.0, 3.0, 5.0])

    def test_duplicate_indices_rejected(self):
        with pytest.raises(uf.ConfigError):
            uf.DeleteRequest((2, 2))


class TestPointLosses:
    def test_regression_residuals(self):
        points = np.array([[1.0, 2.0, 5.0], [0.0, 1.0, 1.0]])
        w = np.array([1.0, 1.0])
        values = point_losses(w, points, uf.LossKind.SQUARED_ERROR, uf.LINEAR_REGRESSION)
        np.testing.assert_allclose(values, [(5.0 - 3.0) ** 2, 0.0])


class TestDatasetCsv:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        data = uf.Dataset(rng.standard_normal((7, 3)))
        path = tmp_path / "points.csv"
        uf.write_dataset_csv(data, path)
        loaded = uf.read_dataset_csv(path)
        np.testing.assert_array_equal(loaded.points, data.points)

    def test_header_carries_dimension(self, tmp_path):
        data = uf.Dataset(np.zeros((2, 4)))
        path = tmp_path / "points.csv"
        uf.write_dataset_csv(data, path)
        assert path.read_text().splitlines()[0] == "dim=4"

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0\n")
        with pytest.raises(uf.ConfigError):
            uf.read_dataset_csv(path)
