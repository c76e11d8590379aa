"""Multivariate Gaussian algebra on Cholesky factors.

Every distribution handled by this package (priors, posteriors, variational
approximations, unlearned outputs, scrubbing references) is a full-covariance
Gaussian stored as a mean vector plus a lower-triangular factor ``L`` with
covariance ``L @ L.T``.  Densities, divergences and samples are all computed
through triangular solves; the covariance is never explicitly inverted, and
positive definiteness holds by construction as long as the factor diagonal
stays positive.

Mixtures of Gaussians appear wherever a stochastic mechanism is marginalized
over the model it was applied to.  Mixture KL divergences have no closed
form, so a seeded Monte Carlo estimator and a moment-matching surrogate are
provided; the two are deliberately independent routes that tests can compare.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import ConfigError, FactorizationError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


def _readonly(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GaussianDist:
    """Gaussian over R^d with covariance carried as a lower-triangular factor.

    ``cov_factor`` must be lower triangular with a strictly positive diagonal,
    so the represented covariance ``cov_factor @ cov_factor.T`` is symmetric
    positive definite for free.
    """

    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mean = _readonly(self.mean)
        factor = _readonly(self.cov_factor)
        if mean.ndim != 1 or factor.ndim != 2:
            raise ShapeError("mean must be a vector and cov_factor a matrix")
        d = mean.shape[0]
        if d < 1 or factor.shape != (d, d):
            raise ShapeError(f"cov_factor must be {d}x{d}, got {factor.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(factor))):
            raise ConfigError("Gaussian parameters must be finite")
        if np.any(np.triu(factor, k=1) != 0.0):
            raise ConfigError("cov_factor must be lower triangular")
        if np.any(np.diag(factor) <= 0.0):
            raise ConfigError("cov_factor diagonal must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", factor)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def precision(self) -> np.ndarray:
        """Inverse covariance, computed by triangular solves on the factor."""
        inv_factor = solve_triangular(
            self.cov_factor, np.eye(self.dim), lower=True
        )
        return inv_factor.T @ inv_factor

    def log_det_cov(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.cov_factor))))

    @staticmethod
    def from_cov(mean, cov) -> "GaussianDist":
        """Build from an explicit covariance matrix via Cholesky."""
        cov = np.asarray(cov, dtype=float)
        cov = 0.5 * (cov + cov.T)
        try:
            factor = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError("covariance is not positive definite") from exc
        return GaussianDist(np.asarray(mean, dtype=float), factor)

    @staticmethod
    def standard(dim: int) -> "GaussianDist":
        return GaussianDist(np.zeros(dim), np.eye(dim))

    def to_json_dict(self) -> dict:
        return {
            "mean": [float(x) for x in self.mean],
            "cov_factor_rows": [[float(x) for x in row] for row in self.cov_factor],
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "GaussianDist":
        return GaussianDist(
            np.asarray(obj["mean"], dtype=float),
            np.asarray(obj["cov_factor_rows"], dtype=float),
        )


def log_pdf(dist: GaussianDist, w) -> float:
    """Exact log-density of ``dist`` at ``w``."""
    return float(log_pdf_batch(dist, np.asarray(w, dtype=float)[None, :])[0])


def log_pdf_batch(dist: GaussianDist, points: np.ndarray) -> np.ndarray:
    """Log-densities at each row of ``points`` (shape ``(k, d)``)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != dist.dim:
        raise ShapeError(
            f"expected points of shape (k, {dist.dim}), got {points.shape}"
        )
    y = solve_triangular(dist.cov_factor, (points - dist.mean).T, lower=True)
    log_det_half = np.sum(np.log(np.diag(dist.cov_factor)))
    with np.errstate(over="ignore"):  # overflowing distance means density zero
        quad_form = np.sum(y * y, axis=0)
    return -0.5 * quad_form - log_det_half - 0.5 * dist.dim * LOG_2PI


def sample(dist: GaussianDist, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` samples, deterministically per seed. Shape ``(count, d)``."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, dist.dim))
    return dist.mean + z @ dist.cov_factor.T


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> float:
    """Closed-form KL divergence KL(p || q) between Gaussians.

    Computed entirely through triangular solves on the two factors.
    """
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch: {p.dim} vs {q.dim}")
    cross = solve_triangular(q.cov_factor, p.cov_factor, lower=True)
    shift = solve_triangular(q.cov_factor, q.mean - p.mean, lower=True)
    trace_term = float(np.sum(cross * cross))
    quad_term = float(shift @ shift)
    log_det_term = float(
        2.0
        * (
            np.sum(np.log(np.diag(q.cov_factor)))
            - np.sum(np.log(np.diag(p.cov_factor)))
        )
    )
    return 0.5 * (trace_term + quad_term - p.dim + log_det_term)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Finite mixture of same-dimension Gaussians with normalized weights."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        weights = _readonly(self.weights)
        components = tuple(self.components)
        if weights.ndim != 1 or len(components) != weights.shape[0]:
            raise ShapeError("one weight per component is required")
        if len(components) == 0:
            raise ConfigError("a mixture needs at least one component")
        if np.any(weights < 0.0):
            raise ConfigError("mixture weights must be non-negative")
        if abs(float(np.sum(weights)) - 1.0) > 1e-12:
            raise ConfigError("mixture weights must sum to 1 within 1e-12")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ShapeError("mixture components must share a dimension")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @staticmethod
    def single(dist: GaussianDist) -> "GaussianMixture":
        return GaussianMixture(np.array([1.0]), (dist,))

    @staticmethod
    def uniform(components) -> "GaussianMixture":
        components = tuple(components)
        k = len(components)
        return GaussianMixture(np.full(k, 1.0 / k), components)


def mixture_log_pdf_batch(mix: GaussianMixture, points: np.ndarray) -> np.ndarray:
    """Mixture log-density at each row of ``points`` via log-sum-exp."""
    points = np.asarray(points, dtype=float)
    active = [(w, c) for w, c in zip(mix.weights, mix.components) if w > 0.0]
    log_terms = np.stack(
        [math.log(w) + log_pdf_batch(c, points) for w, c in active], axis=0
    )
    return logsumexp(log_terms, axis=0)


def mixture_log_pdf(mix: GaussianMixture, w) -> float:
    return float(mixture_log_pdf_batch(mix, np.asarray(w, dtype=float)[None, :])[0])


def sample_mixture(mix: GaussianMixture, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` samples from the mixture, deterministic per seed."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(mix.components), size=count, p=mix.weights)
    z = rng.standard_normal((count, mix.dim))
    out = np.empty((count, mix.dim))
    for k, comp in enumerate(mix.components):
        mask = idx == k
        if np.any(mask):
            out[mask] = comp.mean + z[mask] @ comp.cov_factor.T
    return out


def kl_mixture_mc(
    p: GaussianMixture, q: GaussianMixture, n_mc: int, seed: int
) -> tuple:
    """Monte Carlo estimate of KL(p || q) between mixtures.

    Returns ``(estimate, stderr)``.  Samples are drawn from ``p`` and the
    log-density ratio is averaged; the estimator is consistent for any pair
    of mixtures.  If ``q`` assigns vanishing density to a sample from ``p``
    the estimate is reported as ``+inf``.
    """
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if n_mc < 100:
        raise ConfigError("n_mc must be at least 100")
    points = sample_mixture(p, n_mc, seed)
    diffs = mixture_log_pdf_batch(p, points) - mixture_log_pdf_batch(q, points)
    if not np.all(np.isfinite(diffs)):
        return math.inf, math.inf
    estimate = float(np.mean(diffs))
    stderr = float(np.std(diffs, ddof=1) / math.sqrt(n_mc))
    return estimate, stderr


def mixture_mean_cov(mix: GaussianMixture) -> tuple:
    """Exact first two moments of a Gaussian mixture."""
    mean = np.zeros(mix.dim)
    for w, comp in zip(mix.weights, mix.components):
        mean = mean + w * comp.mean
    cov = np.zeros((mix.dim, mix.dim))
    for w, comp in zip(mix.weights, mix.components):
        delta = comp.mean - mean
        cov = cov + w * (comp.cov + np.outer(delta, delta))
    return mean, 0.5 * (cov + cov.T)


def moment_match(mix: GaussianMixture) -> GaussianDist:
    """Gaussian with exactly the mixture's mean and covariance."""
    mean, cov = mixture_mean_cov(mix)
    return GaussianDist.from_cov(mean, cov)


@dataclass(frozen=True, eq=False)
class Quadratic:
    """Quadratic function ``w -> 0.5 w' M w + v' w + c`` with symmetric M.

    Expected training losses, population losses and Gaussian log-likelihoods
    are all quadratics in the parameter, which keeps their expectations under
    any `GaussianDist` in closed form.
    """

    matrix: np.ndarray
    vector: np.ndarray
    constant: float

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        matrix = _readonly(0.5 * (matrix + matrix.T))
        vector = _readonly(self.vector)
        if matrix.ndim != 2 or vector.ndim != 1:
            raise ShapeError("matrix must be 2-D and vector 1-D")
        if matrix.shape != (vector.shape[0], vector.shape[0]):
            raise ShapeError("matrix and vector dimensions disagree")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "vector", vector)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def value(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(0.5 * w @ self.matrix @ w + self.vector @ w + self.constant)

    def value_batch(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        quad = 0.5 * np.einsum("ki,ij,kj->k", points, self.matrix, points)
        return quad + points @ self.vector + self.constant

    def gradient(self, w) -> np.ndarray:
        return self.matrix @ np.asarray(w, dtype=float) + self.vector

    def expectation(self, dist: GaussianDist) -> float:
        """E[f(W)] for W ~ dist, exact."""
        if dist.dim != self.dim:
            raise ShapeError("quadratic and distribution dimensions disagree")
        factor = dist.cov_factor
        trace_term = float(np.sum((self.matrix @ factor) * factor))
        return self.value(dist.mean) + 0.5 * trace_term

    def scaled(self, alpha: float) -> "Quadratic":
        return Quadratic(alpha * self.matrix, alpha * self.vector, alpha * self.constant)

    def plus(self, other: "Quadratic") -> "Quadratic":
        return Quadratic(
            self.matrix + other.matrix,
            self.vector + other.vector,
            self.constant + other.constant,
        )
