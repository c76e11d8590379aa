"""Exact conjugate Bayesian learning and its retraining oracle.

A `ConjugateModel` pairs a Gaussian prior over the parameter with a Gaussian
likelihood of known noise variance, for either of the two supported tasks.
Because the likelihood is log-quadratic in the parameter, the posterior after
any dataset is Gaussian with natural parameters that are a running sum over
observations.  That sum can be *downdated* — the precision and shift
contributions of erased observations subtracted back out — which yields the
exact retrained-from-scratch posterior without touching the remaining data.
Downdating is the ground-truth oracle every unlearning mechanism in this
package is measured against.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .core import (
    GAUSSIAN_MEAN,
    LINEAR_REGRESSION,
    Dataset,
    LossKind,
    TASK_KINDS,
    training_loss_quadratic,
)
from .errors import ConfigError, DowndateError, FactorizationError, ShapeError
from .gaussian import GaussianDist, Quadratic

STAT_FULL_POSTERIOR = "full-posterior"
STAT_SUMMARY = "summary"
STATISTIC_LEVELS = (STAT_FULL_POSTERIOR, STAT_SUMMARY)


@dataclass(frozen=True, eq=False)
class ConjugateModel:
    """Gaussian prior plus Gaussian likelihood with known noise variance."""

    prior: GaussianDist
    noise_variance: float
    task: str

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ConfigError("noise_variance must be positive")
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def param_dim(self) -> int:
        return self.prior.dim

    @property
    def data_dim(self) -> int:
        if self.task == GAUSSIAN_MEAN:
            return self.param_dim
        return self.param_dim + 1

    def check_data(self, data: Dataset) -> None:
        if data.dim != self.data_dim:
            raise ShapeError(
                f"{self.task} model with parameter dimension {self.param_dim} "
                f"expects data of dimension {self.data_dim}, got {data.dim}"
            )

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "prior": self.prior.to_json_dict(),
            "noise_variance": self.noise_variance,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "ConjugateModel":
        return ConjugateModel(
            prior=GaussianDist.from_json_dict(obj["prior"]),
            noise_variance=float(obj["noise_variance"]),
            task=obj["task"],
        )


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """Gaussian in natural coordinates: precision matrix and shift vector."""

    precision: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        precision = np.asarray(self.precision, dtype=float)
        precision = 0.5 * (precision + precision.T)
        shift = np.asarray(self.shift, dtype=float)
        if precision.ndim != 2 or shift.ndim != 1:
            raise ShapeError("precision must be a matrix and shift a vector")
        if precision.shape != (shift.shape[0], shift.shape[0]):
            raise ShapeError("precision and shift dimensions disagree")
        precision.setflags(write=False)
        shift.setflags(write=False)
        object.__setattr__(self, "precision", precision)
        object.__setattr__(self, "shift", shift)

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    @staticmethod
    def from_gaussian(dist: GaussianDist) -> "NaturalParams":
        precision = dist.precision()
        return NaturalParams(precision, precision @ dist.mean)

    def to_gaussian(self) -> GaussianDist:
        try:
            root = np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError("precision is not positive definite") from exc
        inv_root = solve_triangular(root, np.eye(self.dim), lower=True)
        cov = inv_root.T @ inv_root
        half = solve_triangular(root, self.shift, lower=True)
        mean = solve_triangular(root.T, half, lower=False)
        return GaussianDist.from_cov(mean, cov)

    def mean(self) -> np.ndarray:
        root = np.linalg.cholesky(self.precision)
        half = solve_triangular(root, self.shift, lower=True)
        return solve_triangular(root.T, half, lower=False)


def likelihood_quadratic(model: ConjugateModel, data: Dataset) -> Quadratic:
    """``w -> log P(data | w)`` as an explicit quadratic in the parameter."""
    model.check_data(data)
    nv = model.noise_variance
    points = data.points
    if model.task == GAUSSIAN_MEAN:
        gram = data.n * np.eye(model.param_dim)
        cross = np.sum(points, axis=0)
        sq = float(np.sum(points * points))
        d_obs = model.param_dim
    else:
        features = points[:, :-1]
        targets = points[:, -1]
        gram = features.T @ features
        cross = features.T @ targets
        sq = float(targets @ targets)
        d_obs = 1
    const = -0.5 * data.n * d_obs * np.log(2.0 * np.pi * nv) - sq / (2.0 * nv)
    return Quadratic(-gram / nv, cross / nv, const)


def data_precision_shift(model: ConjugateModel, data: Dataset) -> tuple:
    """Additive contribution of ``data`` to the posterior natural parameters."""
    quad = likelihood_quadratic(model, data)
    return -quad.matrix, quad.vector


def log_lik_subset(w, erased: Dataset, model: ConjugateModel) -> float:
    """Summed Gaussian log-likelihood of the erased observations at ``w``."""
    return likelihood_quadratic(model, erased).value(w)


def log_lik_subset_batch(points_w: np.ndarray, erased: Dataset, model: ConjugateModel):
    return likelihood_quadratic(model, erased).value_batch(points_w)


def grad_log_lik(w, erased: Dataset, model: ConjugateModel) -> np.ndarray:
    """Gradient of the summed erased-data log-likelihood at ``w``."""
    return likelihood_quadratic(model, erased).gradient(w)


def expected_log_lik(q: GaussianDist, erased: Dataset, model: ConjugateModel) -> float:
    """Exact ``E[log P(erased | W)]`` for ``W ~ q``."""
    return likelihood_quadratic(model, erased).expectation(q)


def posterior_natural(model: ConjugateModel, data: Dataset) -> NaturalParams:
    """Natural parameters of the exact posterior after observing ``data``."""
    model.check_data(data)
    prior_nat = NaturalParams.from_gaussian(model.prior)
    add_precision, add_shift = data_precision_shift(model, data)
    return NaturalParams(
        prior_nat.precision + add_precision, prior_nat.shift + add_shift
    )


def exact_posterior(model: ConjugateModel, data: Dataset) -> GaussianDist:
    """Exact conjugate Gaussian posterior given the full dataset.

    Requires at least one observation; the prior itself is available as
    ``model.prior``.
    """
    return posterior_natural(model, data).to_gaussian()


def downdate_posterior(
    post_nat: NaturalParams, model: ConjugateModel, erased: Dataset = None
) -> GaussianDist:
    """Exact posterior on the remaining data, via natural-parameter subtraction.

    ``post_nat`` must be the natural parameters of the posterior on the full
    dataset and ``erased`` a subset of that dataset (the caller's
    responsibility).  ``erased=None`` erases nothing and round-trips the
    posterior.  Erasing more information than the posterior contains leaves
    an indefinite precision and raises :class:`DowndateError`.
    """
    if erased is None:
        return post_nat.to_gaussian()
    sub_precision, sub_shift = data_precision_shift(model, erased)
    downdated = NaturalParams(
        post_nat.precision - sub_precision, post_nat.shift - sub_shift
    )
    try:
        return downdated.to_gaussian()
    except FactorizationError as exc:
        raise DowndateError(
            "erasing these observations leaves a non-positive-definite precision"
        ) from exc


@dataclass(frozen=True, eq=False)
class Statistic:
    """Side information about the training data handed to unlearning mechanisms.

    ``full-posterior`` carries the posterior natural parameters, which is
    enough to reconstruct retraining exactly; ``summary`` carries only the
    posterior mean and the trace of the posterior covariance.
    """

    level: str
    payload: object

    def __post_init__(self):
        if self.level not in STATISTIC_LEVELS:
            raise ConfigError(f"unknown statistic level {self.level!r}")
        if self.level == STAT_FULL_POSTERIOR and not isinstance(
            self.payload, NaturalParams
        ):
            raise ConfigError("full-posterior statistics carry NaturalParams")
        if self.level == STAT_SUMMARY:
            mean, trace = self.payload
            if np.asarray(mean).ndim != 1:
                raise ShapeError("summary statistic mean must be a vector")
            object.__setattr__(
                self, "payload", (np.asarray(mean, dtype=float), float(trace))
            )


def make_statistic(model: ConjugateModel, data: Dataset, level: str) -> Statistic:
    nat = posterior_natural(model, data)
    if level == STAT_FULL_POSTERIOR:
        return Statistic(level, nat)
    if level == STAT_SUMMARY:
        posterior = nat.to_gaussian()
        trace = float(np.sum(posterior.cov_factor**2))
        return Statistic(level, (posterior.mean, trace))
    raise ConfigError(f"unknown statistic level {level!r}")


def statistic_posterior_mean(stat: Statistic) -> np.ndarray:
    """Posterior mean recorded in a full-posterior statistic."""
    if stat.level != STAT_FULL_POSTERIOR:
        raise ConfigError("only full-posterior statistics expose the exact mean")
    return stat.payload.mean()


def tempered_posterior(
    model: ConjugateModel, data: Dataset, loss: LossKind, beta: float
) -> GaussianDist:
    """Exact minimizer of ``E_q[training loss] + KL(q || prior) / beta``.

    For the supported losses the training loss is quadratic, so the minimizer
    is the Gibbs distribution ``prior * exp(-beta * training_loss)``, again a
    Gaussian.  With the Gaussian log-loss and ``beta = n`` this recovers the
    exact Bayes posterior.
    """
    if beta <= 0:
        raise ConfigError("beta must be positive")
    model.check_data(data)
    quad = training_loss_quadratic(
        data, loss, model.task, noise_variance=model.noise_variance
    )
    prior_nat = NaturalParams.from_gaussian(model.prior)
    return NaturalParams(
        prior_nat.precision + beta * quad.matrix,
        prior_nat.shift - beta * quad.vector,
    ).to_gaussian()
