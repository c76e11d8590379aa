"""High-probability risk bounds for learning and unlearning, evaluated numerically.

Each bound compares the expected test loss of a (possibly unlearned) model
against a free-energy style right-hand side: a data-fit term, a KL term
against a data-dependent reference, and a slack term ``log(xi / delta)``
divided by the bound's scale.  The exponential-moment constant ``xi`` is
never bounded analytically here; it is estimated by nested Monte Carlo
(outer over dataset draws, inner over parameter draws from the reference)
with log-sum-exp aggregation and a log-domain standard error.

Three instantiations are shipped:

* ``generic``  — population loss vs. training loss at inverse temperature
  ``beta``; the reference is the model prior or the posterior itself.
* ``avu``      — population log-loss of an unlearned model vs. the
  log-likelihood of the erased points, at scale ``m`` (the number of
  erased points); the reference is the posterior on the full data, and the
  data-fit-plus-KL part of the right-hand side is exactly the expected
  evidence upper bound of the mechanism.
* ``fl``       — population loss vs. remaining-data training loss at
  inverse temperature ``beta``; the reference is the noisy-retraining
  marginal, and the right-hand side is the forgetting objective with
  multiplier ``1 / beta`` plus slack.

`run_validity_experiment` replays a full learn / delete / unlearn pipeline
over many seeded dataset draws and counts how often the bound fails; the
advertised failure probability ``delta`` should dominate the observed rate.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import beta as beta_dist

from .bayes import (
    ConjugateModel,
    STAT_SUMMARY,
    downdate_posterior,
    exact_posterior,
    expected_log_lik,
    likelihood_quadratic,
    make_statistic,
    posterior_natural,
)
from .core import (
    Dataset,
    LossKind,
    PopulationSpec,
    draw_delete_request,
    generate_dataset,
    point_losses,
    population_loss_quadratic,
    split_dataset,
    training_loss_quadratic,
)
from .errors import (
    CapabilityError,
    ConfigError,
    ConsistencyError,
    ShapeError,
    TrialError,
)
from .gaussian import (
    GaussianDist,
    GaussianMixture,
    Quadratic,
    kl_gaussian,
    kl_mixture_mc,
    moment_match,
    sample,
    sample_mixture,
)
from .seeding import derive_seed
from .unlearn import (
    AmortizedMechanism,
    OptimOptions,
    ScrubMechanism,
    ScrubReference,
    amortized_marginal_exact,
    amortized_marginal_mixture,
    apply_amortized,
    certify_epsilon,
    minimize_eubo,
    minimize_forgetting_lagrangian,
    reference_marginal,
    scrub_conditional,
    scrub_marginal_exact,
    train_amortized,
)

KIND_GENERIC = "generic"
KIND_AVU = "avu"
KIND_FL = "fl"
BOUND_KINDS = (KIND_GENERIC, KIND_AVU, KIND_FL)

COMPONENT_NAMES = (
    "population-loss",
    "population-nll",
    "training-loss",
    "remaining-training-loss",
    "subset-loglik",
)

METHODS = ("retrain", "noop", "eubo", "avu", "scrub")


@dataclass(frozen=True)
class BoundInstantiation:
    """Which pair of losses the bound compares, at what scale and delta."""

    kind: str
    a_components: tuple
    beta_or_m: float
    delta: float

    def __post_init__(self):
        if self.kind not in BOUND_KINDS:
            raise ConfigError(f"unknown bound kind {self.kind!r}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.beta_or_m <= 0:
            raise ConfigError("the bound scale must be positive")
        components = tuple(self.a_components)
        if len(components) != 2 or any(c not in COMPONENT_NAMES for c in components):
            raise ConfigError(f"a_components must be a pair from {COMPONENT_NAMES}")
        object.__setattr__(self, "a_components", components)
        object.__setattr__(self, "beta_or_m", float(self.beta_or_m))
        object.__setattr__(self, "delta", float(self.delta))


def generic_instantiation(
    beta: float, delta: float, a_components=("population-loss", "training-loss")
) -> BoundInstantiation:
    return BoundInstantiation(KIND_GENERIC, tuple(a_components), beta, delta)


def avu_instantiation(m: int, delta: float) -> BoundInstantiation:
    return BoundInstantiation(
        KIND_AVU, ("population-nll", "subset-loglik"), float(m), delta
    )


def fl_instantiation(beta: float, delta: float) -> BoundInstantiation:
    return BoundInstantiation(
        KIND_FL, ("population-loss", "remaining-training-loss"), beta, delta
    )


@dataclass(frozen=True)
class XiEstimate:
    """Nested Monte Carlo estimate of the exponential-moment constant, in logs."""

    log_xi: float
    stderr_log: float
    n_outer: int
    n_inner: int
    kind: str
    overflow: bool = False


# ---------------------------------------------------------------------------
# free energy
# ---------------------------------------------------------------------------


def free_energy_irm(
    q: GaussianDist,
    prior: GaussianDist,
    data: Dataset,
    loss: LossKind,
    beta: float,
    model: ConjugateModel,
) -> float:
    """Expected training loss of ``q`` plus ``KL(q || prior) / beta``."""
    if beta <= 0:
        raise ConfigError("beta must be positive")
    quad = training_loss_quadratic(
        data, loss, model.task, noise_variance=model.noise_variance
    )
    return quad.expectation(q) + kl_gaussian(q, prior) / beta


# ---------------------------------------------------------------------------
# optionally clamped expectations
# ---------------------------------------------------------------------------


def _ball_extremes(quad: Quadratic, dist: GaussianDist, n_sigmas: float = 8.0):
    """Rigorous bounds on the quadratic over an ``n_sigmas`` ball of the dist."""
    center = quad.value(dist.mean)
    grad_norm = float(np.linalg.norm(quad.gradient(dist.mean)))
    curv = float(np.linalg.norm(quad.matrix, 2))
    radius = n_sigmas * float(np.linalg.norm(dist.cov_factor, 2))
    spread = radius * grad_norm + 0.5 * curv * radius * radius
    return center - spread, center + spread


def clamped_quadratic_expectation(
    quad: Quadratic,
    dist: GaussianDist,
    clamp,
    seed: int,
    n_mc: int = 20000,
    side: str = "upper",
) -> float:
    """``E[min(f(W), clamp)]`` (or max, for ``side='lower'``) under ``dist``.

    When the clamp provably cannot bind on an eight-sigma ball the exact
    closed-form expectation is returned; otherwise a seeded Monte Carlo
    estimate of the clipped expectation is used.
    """
    if clamp is None:
        return quad.expectation(dist)
    lo, hi = _ball_extremes(quad, dist)
    if side == "upper" and hi <= clamp:
        return quad.expectation(dist)
    if side == "lower" and lo >= -clamp:
        return quad.expectation(dist)
    draws = sample(dist, n_mc, seed)
    values = quad.value_batch(draws)
    clipped = np.minimum(values, clamp) if side == "upper" else np.maximum(values, -clamp)
    return float(np.mean(clipped))


def _per_point_quadratics(model: ConjugateModel, erased: Dataset) -> list:
    return [
        likelihood_quadratic(model, Dataset(erased.points[i : i + 1]))
        for i in range(erased.n)
    ]


def clamped_expected_log_lik(
    q: GaussianDist,
    erased: Dataset,
    model: ConjugateModel,
    clamp,
    seed: int,
    n_mc: int = 20000,
) -> float:
    """``E_q[sum_z max(log P(z | W), -clamp)]``, exact where the clamp is inert."""
    if clamp is None:
        return expected_log_lik(q, erased, model)
    return float(
        sum(
            clamped_quadratic_expectation(
                point_quad, q, clamp, derive_seed(seed, f"point-{i}"), n_mc, side="lower"
            )
            for i, point_quad in enumerate(_per_point_quadratics(model, erased))
        )
    )


def _pointwise_loglik_matrix(
    points_w: np.ndarray, data: Dataset, model: ConjugateModel
) -> np.ndarray:
    """Per-(parameter, observation) log-likelihoods; shape ``(k, n)``."""
    nv = model.noise_variance
    pts = data.points
    if model.task == "gaussian-mean":
        sq = np.sum((points_w[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        d_obs = data.dim
    else:
        features = pts[:, :-1]
        targets = pts[:, -1]
        sq = (targets[None, :] - points_w @ features.T) ** 2
        d_obs = 1
    return -0.5 * d_obs * np.log(2.0 * np.pi * nv) - sq / (2.0 * nv)


# ---------------------------------------------------------------------------
# nested Monte Carlo xi estimation
# ---------------------------------------------------------------------------


class _OuterContext:
    """One outer draw: a dataset, a delete request, and cached quadratics."""

    def __init__(self, model, spec, n, m, loss, clamp, seed):
        self.model = model
        self.spec = spec
        self.loss = loss
        self.clamp = clamp
        self.data = generate_dataset(spec, n, derive_seed(seed, "data"))
        self.request = draw_delete_request(self.data, m, derive_seed(seed, "delete"))
        self.erased, self.remaining = split_dataset(self.data, self.request)

    def component(self, name: str, points_w: np.ndarray) -> np.ndarray:
        clamp = self.clamp
        if name == "population-loss":
            quad = population_loss_quadratic(
                self.spec, self.loss, noise_variance=self.model.noise_variance
            )
            values = quad.value_batch(points_w)
            return np.minimum(values, clamp) if clamp is not None else values
        if name == "population-nll":
            quad = population_loss_quadratic(
                self.spec, LossKind.GAUSSIAN_NLL, noise_variance=self.model.noise_variance
            )
            values = quad.value_batch(points_w)
            return np.minimum(values, clamp) if clamp is not None else values
        if name in ("training-loss", "remaining-training-loss"):
            data = self.data if name == "training-loss" else self.remaining
            if clamp is None:
                quad = training_loss_quadratic(
                    data, self.loss, self.model.task, noise_variance=self.model.noise_variance
                )
                return quad.value_batch(points_w)
            per_point = np.stack(
                [
                    point_losses(
                        w, data.points, self.loss, self.model.task, self.model.noise_variance
                    )
                    for w in points_w
                ]
            )
            return np.mean(np.minimum(per_point, clamp), axis=1)
        if name == "subset-loglik":
            matrix = _pointwise_loglik_matrix(points_w, self.erased, self.model)
            if clamp is not None:
                matrix = np.maximum(matrix, -clamp)
            return np.sum(matrix, axis=1)
        raise ConfigError(f"unknown bound component {name!r}")


def _inner_reference(
    inst, ctx: _OuterContext, prior_rule: str, reference
) -> GaussianDist:
    if prior_rule == "posterior":
        return exact_posterior(ctx.model, ctx.data)
    if prior_rule == "model-prior":
        return ctx.model.prior
    if prior_rule == "retrain-reference":
        if reference is None:
            raise ConfigError("prior_rule 'retrain-reference' needs a ScrubReference")
        nat = posterior_natural(ctx.model, ctx.data)
        retrained = downdate_posterior(nat, ctx.model, ctx.erased)
        return reference_marginal(reference, retrained)
    raise ConfigError(f"unknown prior rule {prior_rule!r}")


def _exponent_values(inst: BoundInstantiation, ctx: _OuterContext, points_w) -> np.ndarray:
    first = ctx.component(inst.a_components[0], points_w)
    second = ctx.component(inst.a_components[1], points_w)
    if inst.kind == KIND_AVU:
        return inst.beta_or_m * first - second
    return inst.beta_or_m * (first - second)


def _log_mean_exp(values: np.ndarray) -> float:
    """Compensated log-mean-exp; summation order cannot perturb the result."""
    peak = float(np.max(values))
    if not math.isfinite(peak):
        return peak
    total = math.fsum(math.exp(v - peak) for v in values.tolist())
    return peak + math.log(total / len(values))


def estimate_xi(
    inst: BoundInstantiation,
    model: ConjugateModel,
    spec: PopulationSpec,
    prior_rule: str,
    n: int,
    m: int,
    n_outer: int,
    n_inner: int,
    seed: int,
    loss: LossKind = LossKind.SQUARED_ERROR,
    reference: ScrubReference = None,
    clamp: float = None,
) -> XiEstimate:
    """Nested Monte Carlo estimate of ``log xi`` with a log-domain stderr.

    Outer draws replay the data law (dataset plus uniform delete request);
    inner draws sample the bound's data-dependent reference.  Per-outer inner
    means are combined by a compensated log-sum-exp, and the standard error
    of the outer average is mapped to the log domain by the delta method.
    """
    if n_outer < 10 or n_inner < 10:
        raise ConfigError("n_outer and n_inner must both be at least 10")
    log_means = np.empty(n_outer)
    for i in range(n_outer):
        outer_seed = derive_seed(seed, f"xi-outer-{i}")
        ctx = _OuterContext(model, spec, n, m, loss, clamp, outer_seed)
        inner = _inner_reference(inst, ctx, prior_rule, reference)
        points_w = sample(inner, n_inner, derive_seed(outer_seed, "inner"))
        log_means[i] = _log_mean_exp(_exponent_values(inst, ctx, points_w))
    peak = float(np.max(log_means))
    if not math.isfinite(peak):
        return XiEstimate(math.inf, math.inf, n_outer, n_inner, inst.kind, overflow=True)
    shifted = np.array([math.exp(v - peak) for v in log_means.tolist()])
    mean_shifted = math.fsum(shifted.tolist()) / n_outer
    log_xi = peak + math.log(mean_shifted)
    centered = [(s - mean_shifted) ** 2 for s in shifted.tolist()]
    sd = math.sqrt(math.fsum(centered) / (n_outer - 1))
    stderr_log = sd / (math.sqrt(n_outer) * mean_shifted)
    return XiEstimate(float(log_xi), float(stderr_log), n_outer, n_inner, inst.kind)


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------


def bound_rhs_avu(eubo_expected: float, m: int, xi: XiEstimate, delta: float) -> float:
    """Scaled expected evidence upper bound plus slack."""
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if xi.kind != KIND_AVU:
        raise ConsistencyError(f"expected an 'avu' xi estimate, got {xi.kind!r}")
    return (eubo_expected + xi.log_xi - math.log(delta)) / m


def bound_rhs_fl(
    fl_value: float, beta: float, xi: XiEstimate, delta: float, lambda_used: float
) -> float:
    """Forgetting-objective value plus slack; requires ``lambda_used == 1/beta``."""
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if xi.kind != KIND_FL:
        raise ConsistencyError(f"expected an 'fl' xi estimate, got {xi.kind!r}")
    if beta <= 0:
        raise ConfigError("beta must be positive")
    if abs(lambda_used - 1.0 / beta) > 1e-9 * max(1.0, 1.0 / beta):
        raise ConsistencyError(
            f"the forgetting multiplier must equal 1/beta: got {lambda_used}, expected {1.0 / beta}"
        )
    return fl_value + (xi.log_xi - math.log(delta)) / beta


# ---------------------------------------------------------------------------
# test log-loss of a mechanism marginal
# ---------------------------------------------------------------------------


def test_log_loss(
    q_marginal: GaussianMixture,
    spec: PopulationSpec,
    model: ConjugateModel,
    mode: str = "closed-form",
    n_mc: int = 0,
    seed: int = 0,
    clamp: float = None,
) -> tuple:
    """Average population log-loss of a model drawn from ``q_marginal``.

    Returns ``(value, stderr)``.  The closed form integrates the Gaussian
    log-loss exactly for each mixture component; Monte Carlo mode samples
    (parameter, observation) pairs and must agree within its stderr.
    """
    if q_marginal.dim != model.param_dim:
        raise ShapeError("marginal dimension does not match the model")
    if mode == "closed-form":
        if spec.kind != model.task:
            raise CapabilityError(
                "closed form requires the population kind and the model task to match"
            )
        quad = population_loss_quadratic(
            spec, LossKind.GAUSSIAN_NLL, noise_variance=model.noise_variance
        )
        values = [
            clamped_quadratic_expectation(quad, comp, clamp, derive_seed(seed, f"comp-{i}"))
            for i, comp in enumerate(q_marginal.components)
        ]
        return float(np.dot(q_marginal.weights, values)), 0.0
    if mode != "mc":
        raise ConfigError(f"unknown mode {mode!r}")
    if n_mc < 1:
        raise ConfigError("mc mode needs n_mc >= 1")
    points_w = sample_mixture(q_marginal, n_mc, derive_seed(seed, "w"))
    observations = generate_dataset(spec, n_mc, derive_seed(seed, "z")).points
    nv = model.noise_variance
    if model.task == "gaussian-mean":
        sq = np.sum((observations - points_w) ** 2, axis=1)
        d_obs = observations.shape[1]
    else:
        sq = (observations[:, -1] - np.sum(observations[:, :-1] * points_w, axis=1)) ** 2
        d_obs = 1
    values = 0.5 * d_obs * np.log(2.0 * np.pi * nv) + sq / (2.0 * nv)
    if clamp is not None:
        values = np.minimum(values, clamp)
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n_mc))


# ---------------------------------------------------------------------------
# pipeline: learn -> delete -> unlearn -> report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to replay one learn/delete/unlearn experiment."""

    model: ConjugateModel
    spec: PopulationSpec
    n: int
    m: int
    method: str = "retrain"
    statistic_level: str = STAT_SUMMARY
    k_components: int = 64
    optimizer: OptimOptions = field(default_factory=OptimOptions)
    loss: LossKind = LossKind.SQUARED_ERROR
    prior_rule: str = "posterior"
    scrub_lambda: float = 1.0
    marginal_mode: str = "moment-match"
    scrub_n_mc: int = 2000
    scrub_optimize: bool = True
    reference_noise_scale: float = 0.25
    amortized: AmortizedMechanism = None
    log_loss_clamp: float = 50.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.method!r}")
        if not 1 <= self.m < self.n:
            raise ConfigError("m must satisfy 1 <= m < n")
        if self.k_components < 1:
            raise ConfigError("k_components must be >= 1")
        if self.reference_noise_scale <= 0:
            raise ConfigError("reference_noise_scale must be positive")

    def reference(self) -> ScrubReference:
        return ScrubReference(self.reference_noise_scale * np.eye(self.model.param_dim))


@dataclass(frozen=True)
class TrialPieces:
    """Artifacts of one pipeline run on one dataset draw."""

    data: Dataset
    request: object
    erased: Dataset
    remaining: Dataset
    learned: GaussianDist
    retrained: GaussianDist
    components: tuple
    weights: np.ndarray
    exact_marginal: GaussianDist
    scrub: ScrubMechanism

    @property
    def mixture(self) -> GaussianMixture:
        return GaussianMixture(self.weights, self.components)


def run_unlearning(pipeline: PipelineConfig, seed: int) -> TrialPieces:
    """Draw a dataset and a delete request, learn, and apply the mechanism."""
    model, spec = pipeline.model, pipeline.spec
    data = generate_dataset(spec, pipeline.n, derive_seed(seed, "data"))
    request = draw_delete_request(data, pipeline.m, derive_seed(seed, "delete"))
    erased, remaining = split_dataset(data, request)
    learned = exact_posterior(model, data)
    nat = posterior_natural(model, data)
    retrained = downdate_posterior(nat, model, erased)
    scrub = None
    if pipeline.method == "retrain":
        components, exact = (retrained,), retrained
    elif pipeline.method == "noop":
        components, exact = (learned,), learned
    elif pipeline.method == "eubo":
        state = minimize_eubo(learned, learned, erased, model, pipeline.optimizer)
        components, exact = (state.q,), state.q
    elif pipeline.method == "avu":
        mech = pipeline.amortized
        if mech is None:
            raise ConfigError("method 'avu' needs a trained AmortizedMechanism")
        stat = make_statistic(model, data, mech.statistic_level)
        draws = sample(learned, pipeline.k_components, derive_seed(seed, "wl"))
        components = tuple(
            apply_amortized(mech, w_l, stat, erased, model) for w_l in draws
        )
        exact = amortized_marginal_exact(mech, learned, stat, erased, model)
    elif pipeline.method == "scrub":
        reference = pipeline.reference()
        init = ScrubMechanism.identity(model.param_dim, reference.noise_cov_factor)
        scrub = init
        if pipeline.scrub_optimize:
            scrub = minimize_forgetting_lagrangian(
                init,
                learned,
                retrained,
                reference,
                remaining,
                pipeline.scrub_lambda,
                pipeline.scrub_n_mc,
                derive_seed(seed, "scrub"),
                pipeline.marginal_mode,
                pipeline.optimizer,
                pipeline.k_components,
            )
        draws = sample(learned, pipeline.k_components, derive_seed(seed, "wl"))
        components = tuple(scrub_conditional(scrub, w_l) for w_l in draws)
        exact = scrub_marginal_exact(scrub, learned)
    else:  # pragma: no cover - guarded by PipelineConfig validation
        raise ConfigError(f"unknown method {pipeline.method!r}")
    weights = np.full(len(components), 1.0 / len(components))
    return TrialPieces(
        data, request, erased, remaining, learned, retrained,
        tuple(components), weights, exact, scrub,
    )


@dataclass(frozen=True)
class BoundReport:
    """All terms of one bound instantiation on one dataset draw."""

    lhs: float
    lhs_stderr: float
    training_term: float
    kl_term: float
    slack_term: float
    rhs: float
    holds: bool
    inst: BoundInstantiation
    low_confidence: bool = False


def _finish_report(lhs_values, weights, training_term, kl_term, slack_term, inst, xi):
    lhs_values = np.asarray(lhs_values, dtype=float)
    lhs = float(np.dot(weights, lhs_values))
    if lhs_values.shape[0] > 1:
        lhs_stderr = float(np.std(lhs_values, ddof=1) / math.sqrt(lhs_values.shape[0]))
    else:
        lhs_stderr = 0.0
    rhs = training_term + kl_term + slack_term
    return BoundReport(
        lhs=lhs,
        lhs_stderr=lhs_stderr,
        training_term=float(training_term),
        kl_term=float(kl_term),
        slack_term=float(slack_term),
        rhs=float(rhs),
        holds=bool(lhs <= rhs + 3.0 * lhs_stderr),
        inst=inst,
        low_confidence=bool(xi.stderr_log > 0.5),
    )


def avu_bound_report(
    components,
    weights,
    learned: GaussianDist,
    erased: Dataset,
    model: ConjugateModel,
    spec: PopulationSpec,
    inst: BoundInstantiation,
    xi: XiEstimate,
    clamp: float = None,
    seed: int = 0,
) -> BoundReport:
    """Evidence-upper-bound risk report for any set of per-model outputs."""
    m = erased.n
    pop_nll = population_loss_quadratic(
        spec, LossKind.GAUSSIAN_NLL, noise_variance=model.noise_variance
    )
    data_terms, kl_terms, lhs_values = [], [], []
    for i, comp in enumerate(components):
        data_terms.append(
            clamped_expected_log_lik(
                comp, erased, model, clamp, derive_seed(seed, f"avu-data-{i}")
            )
        )
        kl_terms.append(kl_gaussian(comp, learned))
        lhs_values.append(
            clamped_quadratic_expectation(
                pop_nll, comp, clamp, derive_seed(seed, f"avu-lhs-{i}")
            )
        )
    weights = np.asarray(weights, dtype=float)
    training_term = float(np.dot(weights, data_terms)) / m
    kl_term = float(np.dot(weights, kl_terms)) / m
    slack_term = (xi.log_xi - math.log(inst.delta)) / m
    return _finish_report(
        lhs_values, weights, training_term, kl_term, slack_term, inst, xi
    )


def fl_bound_report(
    pieces: TrialPieces,
    pipeline: PipelineConfig,
    inst: BoundInstantiation,
    xi: XiEstimate,
    seed: int = 0,
) -> BoundReport:
    """Forgetting-objective risk report at multiplier ``1 / beta``."""
    beta = inst.beta_or_m
    lam = 1.0 / beta
    model, spec = pipeline.model, pipeline.spec
    clamp = pipeline.log_loss_clamp
    ref = reference_marginal(pipeline.reference(), pieces.retrained)
    loss_quad = training_loss_quadratic(
        pieces.remaining, pipeline.loss, model.task, noise_variance=model.noise_variance
    )
    pop_quad = population_loss_quadratic(
        spec, pipeline.loss, noise_variance=model.noise_variance
    )
    if pipeline.marginal_mode == "moment-match":
        marginal = pieces.exact_marginal or moment_match(pieces.mixture)
        training_term = clamped_quadratic_expectation(
            loss_quad, marginal, clamp, derive_seed(seed, "fl-train")
        )
        kl_value = kl_gaussian(marginal, ref)
        lhs_values = [
            clamped_quadratic_expectation(
                pop_quad, marginal, clamp, derive_seed(seed, "fl-lhs")
            )
        ]
        weights = np.array([1.0])
    else:
        mixture = pieces.mixture
        training_term = float(
            np.dot(
                mixture.weights,
                [
                    clamped_quadratic_expectation(
                        loss_quad, c, clamp, derive_seed(seed, f"fl-train-{i}")
                    )
                    for i, c in enumerate(mixture.components)
                ],
            )
        )
        kl_value, _ = kl_mixture_mc(
            mixture,
            GaussianMixture.single(ref),
            pipeline.scrub_n_mc,
            derive_seed(seed, "fl-kl"),
        )
        lhs_values = [
            clamped_quadratic_expectation(
                pop_quad, c, clamp, derive_seed(seed, f"fl-lhs-{i}")
            )
            for i, c in enumerate(mixture.components)
        ]
        weights = mixture.weights
    kl_term = lam * kl_value
    slack_term = (xi.log_xi - math.log(inst.delta)) / beta
    return _finish_report(
        lhs_values, weights, training_term, kl_term, slack_term, inst, xi
    )


def generic_bound_report(
    pieces: TrialPieces,
    pipeline: PipelineConfig,
    inst: BoundInstantiation,
    xi: XiEstimate,
    seed: int = 0,
) -> BoundReport:
    """Plain learning bound: the posterior against the configured reference."""
    beta = inst.beta_or_m
    model, spec = pipeline.model, pipeline.spec
    clamp = pipeline.log_loss_clamp
    posterior = pieces.learned
    train_quad = training_loss_quadratic(
        pieces.data, pipeline.loss, model.task, noise_variance=model.noise_variance
    )
    pop_quad = population_loss_quadratic(
        spec, pipeline.loss, noise_variance=model.noise_variance
    )
    if pipeline.prior_rule == "posterior":
        kl_value = 0.0
    elif pipeline.prior_rule == "model-prior":
        kl_value = kl_gaussian(posterior, model.prior)
    else:
        raise ConfigError(
            f"generic bounds support prior rules 'posterior' and 'model-prior', got {pipeline.prior_rule!r}"
        )
    training_term = clamped_quadratic_expectation(
        train_quad, posterior, clamp, derive_seed(seed, "generic-train")
    )
    lhs_values = [
        clamped_quadratic_expectation(
            pop_quad, posterior, clamp, derive_seed(seed, "generic-lhs")
        )
    ]
    kl_term = kl_value / beta
    slack_term = (xi.log_xi - math.log(inst.delta)) / beta
    return _finish_report(
        lhs_values, np.array([1.0]), training_term, kl_term, slack_term, inst, xi
    )


def bound_trial(
    inst: BoundInstantiation,
    pipeline: PipelineConfig,
    xi: XiEstimate,
    trial_seed: int,
) -> BoundReport:
    """Run the full pipeline once and evaluate the bound on that draw."""
    pieces = run_unlearning(pipeline, trial_seed)
    if inst.kind == KIND_AVU:
        return avu_bound_report(
            pieces.components,
            pieces.weights,
            pieces.learned,
            pieces.erased,
            pipeline.model,
            pipeline.spec,
            inst,
            xi,
            clamp=pipeline.log_loss_clamp,
            seed=derive_seed(trial_seed, "bound"),
        )
    if inst.kind == KIND_FL:
        return fl_bound_report(pieces, pipeline, inst, xi, derive_seed(trial_seed, "bound"))
    return generic_bound_report(pieces, pipeline, inst, xi, derive_seed(trial_seed, "bound"))


def estimate_xi_for(
    inst: BoundInstantiation, pipeline: PipelineConfig, n_outer: int, n_inner: int, seed: int
) -> XiEstimate:
    """Estimate xi with the prior rule implied by the bound kind."""
    if inst.kind == KIND_AVU:
        prior_rule, reference = "posterior", None
    elif inst.kind == KIND_FL:
        prior_rule, reference = "retrain-reference", pipeline.reference()
    else:
        prior_rule, reference = pipeline.prior_rule, None
    return estimate_xi(
        inst,
        pipeline.model,
        pipeline.spec,
        prior_rule,
        pipeline.n,
        pipeline.m,
        n_outer,
        n_inner,
        seed,
        loss=pipeline.loss,
        reference=reference,
        clamp=pipeline.log_loss_clamp,
    )


# ---------------------------------------------------------------------------
# validity experiments
# ---------------------------------------------------------------------------


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple:
    """Exact binomial confidence interval for a rate of ``k`` out of ``n``."""
    alpha = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta_dist.ppf(alpha / 2.0, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1.0 - alpha / 2.0, k + 1, n - k))
    return lo, hi


@dataclass
class ValidityReport:
    """Violation counts for a bound replayed over many dataset draws."""

    n_trials: int
    n_violations: int
    delta: float
    binomial_ci: tuple
    resolution_warning: bool
    xi: XiEstimate
    trial_rows: list

    @property
    def violation_rate(self) -> float:
        return self.n_violations / self.n_trials

    def within_tolerance(self) -> bool:
        """Observed rate at most delta plus three binomial standard errors."""
        slack = 3.0 * math.sqrt(self.delta * (1.0 - self.delta) / self.n_trials)
        return self.violation_rate <= self.delta + slack


def _report_row(trial_seed: int, report: BoundReport) -> dict:
    return {
        "seed": trial_seed,
        "lhs": report.lhs,
        "lhs_stderr": report.lhs_stderr,
        "training_term": report.training_term,
        "kl_term": report.kl_term,
        "slack_term": report.slack_term,
        "rhs": report.rhs,
        "holds": report.holds,
    }


def _validity_trial(args):
    inst, pipeline, xi, index, trial_seed = args
    try:
        report = bound_trial(inst, pipeline, xi, trial_seed)
    except Exception as exc:  # noqa: BLE001 - re-raised with replay info
        raise TrialError(index, trial_seed, str(exc)) from exc
    return _report_row(trial_seed, report)


def run_validity_experiment(
    inst: BoundInstantiation,
    pipeline: PipelineConfig,
    n_trials: int,
    seed: int,
    jobs: int = 1,
    xi: XiEstimate = None,
    xi_n_outer: int = 800,
    xi_n_inner: int = 256,
) -> ValidityReport:
    """Replay the pipeline ``n_trials`` times and count bound violations.

    ``xi`` is estimated once (it is a constant of the instantiation, not of
    a dataset draw) and shared by every trial.  Trial ``i`` uses root seed
    ``seed + i``, so any trial can be replayed in isolation.
    """
    if n_trials < 100:
        raise ConfigError("n_trials must be at least 100")
    if xi is None:
        xi = estimate_xi_for(inst, pipeline, xi_n_outer, xi_n_inner, derive_seed(seed, "xi"))
    tasks = [(inst, pipeline, xi, i, seed + i) for i in range(n_trials)]
    if jobs <= 1:
        rows = [_validity_trial(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_validity_trial, tasks, chunksize=max(1, n_trials // (8 * jobs))))
    violations = sum(1 for row in rows if not row["holds"])
    return ValidityReport(
        n_trials=n_trials,
        n_violations=violations,
        delta=inst.delta,
        binomial_ci=clopper_pearson(violations, n_trials),
        resolution_warning=bool(inst.delta * n_trials < 5.0),
        xi=xi,
        trial_rows=rows,
    )
