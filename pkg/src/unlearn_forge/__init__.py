"""Bayesian machine-unlearning workbench on exactly solvable Gaussian models.

The package provides exact conjugate learning with a closed-form retraining
oracle, three unlearning mechanism families (per-request variational,
amortized, and scrubbing), KL unlearning certificates, and numerically
evaluated high-probability risk bounds with empirical validity experiments.
"""

from .bayes import (
    ConjugateModel,
    NaturalParams,
    STAT_FULL_POSTERIOR,
    STAT_SUMMARY,
    Statistic,
    downdate_posterior,
    exact_posterior,
    expected_log_lik,
    log_lik_subset,
    make_statistic,
    posterior_natural,
    tempered_posterior,
)
from .core import (
    Dataset,
    DeleteRequest,
    GAUSSIAN_MEAN,
    LINEAR_REGRESSION,
    LossKind,
    PopulationSpec,
    draw_delete_request,
    generalization_error,
    generate_dataset,
    population_loss,
    read_dataset_csv,
    split_dataset,
    training_loss,
    write_dataset_csv,
)
from .errors import (
    CapabilityError,
    ConfigError,
    ConsistencyError,
    DivergenceError,
    DowndateError,
    FactorizationError,
    ShapeError,
    TrialError,
    UnlearnForgeError,
)
from .gaussian import (
    GaussianDist,
    GaussianMixture,
    Quadratic,
    kl_gaussian,
    kl_mixture_mc,
    log_pdf,
    moment_match,
    sample,
)
from .pacbayes import (
    BoundInstantiation,
    BoundReport,
    PipelineConfig,
    ValidityReport,
    XiEstimate,
    avu_instantiation,
    bound_rhs_avu,
    bound_rhs_fl,
    bound_trial,
    estimate_xi,
    fl_instantiation,
    free_energy_irm,
    generic_instantiation,
    run_unlearning,
    run_validity_experiment,
    test_log_loss,
)
from .seeding import derive_seed
from .unlearn import (
    AmortizedMechanism,
    CertResult,
    GaussianFreeEnergy,
    OptimOptions,
    ScrubMechanism,
    ScrubReference,
    VariationalState,
    apply_amortized,
    certify_epsilon,
    eubo,
    forgetting_lagrangian,
    minimize_eubo,
    minimize_forgetting_lagrangian,
    minimize_gaussian_free_energy,
    sweep_forgetting_lagrangian,
    train_amortized,
)

__version__ = "0.1.0"
