"""Synthetic tasks, loss functions, and delete-request plumbing.

Two model tasks are supported, both exactly solvable:

* ``gaussian-mean`` — observations are noisy copies of a d-dimensional mean
  parameter.
* ``linear-regression`` — observations are ``(features, target)`` rows where
  the target is a noisy linear function of the features; the last column of
  a data row is the target.

Both the empirical training loss and the population loss are quadratic in
the parameter for the two supported loss kinds, which is what keeps every
downstream expectation closed-form.
"""

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CapabilityError, ConfigError, ShapeError
from .gaussian import GaussianDist, Quadratic, sample
from .seeding import derive_seed

GAUSSIAN_MEAN = "gaussian-mean"
LINEAR_REGRESSION = "linear-regression"
TASK_KINDS = (GAUSSIAN_MEAN, LINEAR_REGRESSION)

LOG_2PI = float(np.log(2.0 * np.pi))


class LossKind(str, Enum):
    SQUARED_ERROR = "squared-error"
    GAUSSIAN_NLL = "gaussian-negative-log-likelihood"


def _readonly(a):
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    """Synthetic population: the data-generating law observations come from.

    ``true_params`` is the mean vector for ``gaussian-mean`` and the weight
    vector for ``linear-regression``; regression additionally needs a
    Gaussian ``feature_distribution`` over the feature vector.
    """

    kind: str
    true_params: np.ndarray
    noise_variance: float
    feature_distribution: GaussianDist = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown population kind {self.kind!r}")
        params = _readonly(self.true_params)
        if params.ndim != 1 or params.shape[0] < 1:
            raise ShapeError("true_params must be a non-empty vector")
        if not np.all(np.isfinite(params)):
            raise ConfigError("true_params must be finite")
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ConfigError("noise_variance must be positive")
        if self.kind == LINEAR_REGRESSION:
            if self.feature_distribution is None:
                raise ConfigError("linear-regression requires a feature_distribution")
            if self.feature_distribution.dim != params.shape[0]:
                raise ShapeError("feature_distribution dimension must match true_params")
        object.__setattr__(self, "true_params", params)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def param_dim(self) -> int:
        return self.true_params.shape[0]

    @property
    def data_dim(self) -> int:
        if self.kind == GAUSSIAN_MEAN:
            return self.param_dim
        return self.param_dim + 1


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered collection of observations; one row per data point."""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ShapeError("points must be a non-empty (n, d) array")
        if not np.all(np.isfinite(points)):
            raise ConfigError("data points must be finite")
        points = points.copy()
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class DeleteRequest:
    """Indices of the observations whose influence must be removed."""

    erase_indices: tuple

    def __post_init__(self):
        indices = tuple(sorted(int(i) for i in self.erase_indices))
        if len(indices) < 1:
            raise ConfigError("a delete request must name at least one point")
        if len(set(indices)) != len(indices):
            raise ConfigError("erase indices must be distinct")
        if indices[0] < 0:
            raise ConfigError("erase indices must be non-negative")
        object.__setattr__(self, "erase_indices", indices)

    @property
    def m(self) -> int:
        return len(self.erase_indices)


def generate_dataset(spec: PopulationSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. observations from the population; seed-deterministic."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    noise_scale = float(np.sqrt(spec.noise_variance))
    if spec.kind == GAUSSIAN_MEAN:
        points = spec.true_params + noise_scale * rng.standard_normal(
            (n, spec.param_dim)
        )
        return Dataset(points)
    features = sample(spec.feature_distribution, n, derive_seed(seed, "features"))
    targets = features @ spec.true_params + noise_scale * rng.standard_normal(n)
    return Dataset(np.hstack([features, targets[:, None]]))


def draw_delete_request(data: Dataset, m: int, seed: int) -> DeleteRequest:
    """Uniformly random size-``m`` subset of the dataset, without replacement."""
    if not 1 <= m < data.n:
        raise ConfigError(f"m must satisfy 1 <= m < n, got m={m}, n={data.n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(data.n, size=m, replace=False)
    return DeleteRequest(tuple(int(i) for i in idx))


def split_dataset(data: Dataset, request: DeleteRequest) -> tuple:
    """Partition into ``(erased, remaining)`` per the delete request."""
    if request.erase_indices[-1] >= data.n:
        raise ConfigError("erase index out of range")
    if request.m >= data.n:
        raise ConfigError("cannot erase the entire dataset")
    mask = np.zeros(data.n, dtype=bool)
    mask[list(request.erase_indices)] = True
    return Dataset(data.points[mask]), Dataset(data.points[~mask])


def _infer_task(param_dim: int, data_dim: int) -> str:
    if param_dim == data_dim:
        return GAUSSIAN_MEAN
    if param_dim == data_dim - 1 and param_dim >= 1:
        return LINEAR_REGRESSION
    raise ShapeError(
        f"parameter dimension {param_dim} is incompatible with data dimension {data_dim}"
    )


def _require_noise_variance(loss: LossKind, noise_variance) -> float:
    if loss == LossKind.GAUSSIAN_NLL:
        if noise_variance is None:
            raise ConfigError(
                "the Gaussian log-loss needs a noise_variance from the model"
            )
        if noise_variance <= 0:
            raise ConfigError("noise_variance must be positive")
        return float(noise_variance)
    return 0.0


def point_losses(
    w, points: np.ndarray, loss: LossKind, task: str, noise_variance=None
) -> np.ndarray:
    """Per-observation loss values for parameter ``w``; vectorized over rows."""
    w = np.asarray(w, dtype=float)
    points = np.asarray(points, dtype=float)
    if task == GAUSSIAN_MEAN:
        residual_sq = np.sum((points - w) ** 2, axis=1)
        d = points.shape[1]
    else:
        residual_sq = (points[:, -1] - points[:, :-1] @ w) ** 2
        d = 1
    if loss == LossKind.SQUARED_ERROR:
        return residual_sq
    nv = _require_noise_variance(loss, noise_variance)
    return 0.5 * d * np.log(2.0 * np.pi * nv) + residual_sq / (2.0 * nv)


def training_loss(w, data: Dataset, loss: LossKind, noise_variance=None) -> float:
    """Average per-observation loss of ``w`` over the dataset."""
    w = np.asarray(w, dtype=float)
    task = _infer_task(w.shape[0], data.dim)
    return float(np.mean(point_losses(w, data.points, loss, task, noise_variance)))


def training_loss_quadratic(
    data: Dataset, loss: LossKind, task: str, noise_variance=None
) -> Quadratic:
    """The training loss as an explicit quadratic in the parameter."""
    points = data.points
    n = data.n
    if task == GAUSSIAN_MEAN:
        gram = float(n) * np.eye(data.dim)
        cross = np.sum(points, axis=0)
        sq = float(np.sum(points * points))
        d_obs = data.dim
    elif task == LINEAR_REGRESSION:
        features = points[:, :-1]
        targets = points[:, -1]
        gram = features.T @ features
        cross = features.T @ targets
        sq = float(targets @ targets)
        d_obs = 1
    else:
        raise ConfigError(f"unknown task {task!r}")
    if loss == LossKind.SQUARED_ERROR:
        return Quadratic(2.0 * gram / n, -2.0 * cross / n, sq / n)
    nv = _require_noise_variance(loss, noise_variance)
    const = 0.5 * d_obs * np.log(2.0 * np.pi * nv) + sq / (2.0 * nv * n)
    return Quadratic(gram / (nv * n), -cross / (nv * n), const)


def _feature_second_moment(spec: PopulationSpec) -> np.ndarray:
    fd = spec.feature_distribution
    return fd.cov + np.outer(fd.mean, fd.mean)


def population_loss_quadratic(
    spec: PopulationSpec, loss: LossKind, noise_variance=None
) -> Quadratic:
    """The population loss ``w -> E[loss(w, Z)]`` as an explicit quadratic."""
    theta = spec.true_params
    if spec.kind == GAUSSIAN_MEAN:
        second = np.eye(spec.param_dim)
        theta_w = theta
        spread = float(theta @ theta + spec.param_dim * spec.noise_variance)
        d_obs = spec.param_dim
    else:
        second = _feature_second_moment(spec)
        theta_w = second @ theta
        spread = float(theta @ second @ theta + spec.noise_variance)
        d_obs = 1
    if loss == LossKind.SQUARED_ERROR:
        return Quadratic(2.0 * second, -2.0 * theta_w, spread)
    nv = _require_noise_variance(
        loss, spec.noise_variance if noise_variance is None else noise_variance
    )
    const = 0.5 * d_obs * np.log(2.0 * np.pi * nv) + spread / (2.0 * nv)
    return Quadratic(second / nv, -theta_w / nv, const)


def _population_loss_mc(
    w, spec: PopulationSpec, loss: LossKind, n_mc: int, seed: int, noise_variance=None
) -> tuple:
    if n_mc < 1:
        raise ConfigError("n_mc must be >= 1")
    nv = spec.noise_variance if noise_variance is None else noise_variance
    draws = generate_dataset(spec, n_mc, seed)
    values = point_losses(w, draws.points, loss, spec.kind, nv)
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n_mc))


def population_loss(
    w,
    spec: PopulationSpec,
    loss: LossKind,
    mode: str = "closed-form",
    n_mc: int = 0,
    seed: int = 0,
    noise_variance=None,
) -> float:
    """Expected loss of ``w`` on a fresh observation from the population."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != spec.param_dim:
        raise ShapeError("parameter dimension does not match the population spec")
    if mode == "closed-form":
        if spec.kind not in TASK_KINDS:
            raise CapabilityError(f"no closed form for population kind {spec.kind!r}")
        return population_loss_quadratic(spec, loss, noise_variance).value(w)
    if mode == "monte-carlo":
        return _population_loss_mc(w, spec, loss, n_mc, seed, noise_variance)[0]
    raise ConfigError(f"unknown mode {mode!r}")


def generalization_error(
    posterior: GaussianDist,
    data: Dataset,
    spec: PopulationSpec,
    loss: LossKind,
    n_mc: int,
    seed: int,
    noise_variance=None,
) -> tuple:
    """Monte Carlo estimate of E[population loss - training loss] under ``posterior``.

    Returns ``(estimate, stderr)``.
    """
    if posterior.dim != spec.param_dim:
        raise ShapeError("posterior dimension does not match the population spec")
    task = _infer_task(posterior.dim, data.dim)
    pop_quad = population_loss_quadratic(spec, loss, noise_variance)
    train_quad = training_loss_quadratic(data, loss, task, noise_variance)
    draws = sample(posterior, n_mc, seed)
    gaps = pop_quad.value_batch(draws) - train_quad.value_batch(draws)
    return float(np.mean(gaps)), float(np.std(gaps, ddof=1) / np.sqrt(n_mc))


def write_dataset_csv(data: Dataset, path) -> None:
    """Write a dataset as CSV: a ``dim=<d>`` header line, one point per row."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"dim={data.dim}"])
        for row in data.points:
            writer.writerow([repr(float(x)) for x in row])


def read_dataset_csv(path) -> Dataset:
    """Read a dataset written by :func:`write_dataset_csv`."""
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or not header[0].startswith("dim="):
            raise ConfigError("dataset CSV must start with a dim=<d> header")
        dim = int(header[0].split("=", 1)[1])
        rows = [[float(x) for x in row] for row in reader if row]
    points = np.asarray(rows, dtype=float)
    if points.ndim != 2 or points.shape[1] != dim:
        raise ConfigError("dataset CSV rows do not match the declared dimension")
    return Dataset(points)
