"""Exception types shared across the package."""


class UnlearnForgeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(UnlearnForgeError, ValueError):
    """Operands have incompatible dimensions."""


class ConfigError(UnlearnForgeError, ValueError):
    """A parameter or configuration value violates its contract."""


class CapabilityError(UnlearnForgeError, ValueError):
    """The requested closed-form computation is not available for these inputs."""


class DowndateError(UnlearnForgeError, ValueError):
    """Removing the requested observations would leave an invalid posterior."""


class FactorizationError(UnlearnForgeError, ValueError):
    """A matrix expected to be positive definite failed to factor."""


class DivergenceError(UnlearnForgeError, RuntimeError):
    """An iterative optimizer produced a non-finite objective."""


class ConsistencyError(UnlearnForgeError, ValueError):
    """Two arguments that must agree were inconsistent."""


class TrialError(UnlearnForgeError, RuntimeError):
    """A trial inside a batched experiment failed; carries replay information."""

    def __init__(self, trial_index, trial_seed, message):
        super().__init__(f"trial {trial_index} (seed {trial_seed}) failed: {message}")
        self.trial_index = trial_index
        self.trial_seed = trial_seed
