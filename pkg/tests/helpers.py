"""Shared generators and independent numeric oracles for the test suite.

The oracles here deliberately avoid the package's own closed forms: posterior
moments come from dense grid integration, divergences from adaptive
quadrature, and expectations from brute-force Monte Carlo.
"""

import numpy as np
from scipy.integrate import quad

import unlearn_forge as uf


def random_gaussian(rng, d, mean_scale=0.5, diag_range=(0.6, 1.5), offdiag=0.3):
    lower = np.tril(rng.standard_normal((d, d)) * offdiag, -1)
    factor = lower + np.diag(rng.uniform(*diag_range, d))
    return uf.GaussianDist(rng.standard_normal(d) * mean_scale, factor)


def random_instance(rng, d_max=5, n_max=50, m_max=5,
                    tasks=(uf.GAUSSIAN_MEAN, uf.LINEAR_REGRESSION)):
    """A random conjugate model, population, dataset and delete request."""
    d = int(rng.integers(1, d_max + 1))
    task = tasks[int(rng.integers(len(tasks)))]
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, min(m_max, n - 1) + 1))
    prior = random_gaussian(rng, d)
    noise_variance = float(rng.uniform(0.5, 2.0))
    model = uf.ConjugateModel(prior, noise_variance, task)
    if task == uf.GAUSSIAN_MEAN:
        spec = uf.PopulationSpec(task, rng.standard_normal(d) * 0.5, noise_variance)
    else:
        features = random_gaussian(rng, d, mean_scale=0.3, diag_range=(0.7, 1.3), offdiag=0.2)
        spec = uf.PopulationSpec(
            task, rng.standard_normal(d) * 0.5, noise_variance, features
        )
    seed = int(rng.integers(0, 2**31))
    data = uf.generate_dataset(spec, n, seed)
    request = uf.draw_delete_request(data, m, seed + 1)
    return model, spec, data, request


def grid_posterior_1d(prior_mean, prior_var, noise_var, observations,
                      features=None, span=12.0, n_grid=200001):
    """Posterior mean/variance for a scalar parameter by dense grid integration."""
    observations = np.asarray(observations, dtype=float)
    half_width = span * max(np.sqrt(prior_var), np.sqrt(noise_var), 1.0)
    grid = np.linspace(prior_mean - half_width, prior_mean + half_width, n_grid)
    log_post = -((grid - prior_mean) ** 2) / (2.0 * prior_var)
    if features is None:
        for z in observations:
            log_post = log_post - (z - grid) ** 2 / (2.0 * noise_var)
    else:
        for x, y in zip(np.asarray(features, dtype=float), observations):
            log_post = log_post - (y - x * grid) ** 2 / (2.0 * noise_var)
    weights = np.exp(log_post - log_post.max())
    weights /= np.trapezoid(weights, grid)
    mean = np.trapezoid(grid * weights, grid)
    var = np.trapezoid((grid - mean) ** 2 * weights, grid)
    return float(mean), float(var)


def grid_gibbs_1d(prior_mean, prior_var, neg_energy, span=12.0, n_grid=200001):
    """Moments of ``prior * exp(neg_energy(w))`` on a dense scalar grid."""
    half_width = span * max(np.sqrt(prior_var), 1.0)
    grid = np.linspace(prior_mean - half_width, prior_mean + half_width, n_grid)
    log_post = -((grid - prior_mean) ** 2) / (2.0 * prior_var) + neg_energy(grid)
    weights = np.exp(log_post - log_post.max())
    weights /= np.trapezoid(weights, grid)
    mean = np.trapezoid(grid * weights, grid)
    var = np.trapezoid((grid - mean) ** 2 * weights, grid)
    return float(mean), float(var)


def quadrature_kl_1d(log_p, log_q, lo, hi):
    """KL divergence between scalar densities by adaptive quadrature."""

    def integrand(w):
        lp = log_p(w)
        return np.exp(lp) * (lp - log_q(w))

    value, _ = quad(integrand, lo, hi, limit=400)
    return value


def natural_params_gap(left: uf.GaussianDist, right: uf.GaussianDist) -> float:
    """Largest absolute difference between two posteriors' natural parameters."""
    nat_left = uf.NaturalParams.from_gaussian(left)
    nat_right = uf.NaturalParams.from_gaussian(right)
    return max(
        float(np.max(np.abs(nat_left.precision - nat_right.precision))),
        float(np.max(np.abs(nat_left.shift - nat_right.shift))),
    )
