"""Error types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value (negative weight, zero identities, ...)."""


class ContractViolation(ValueError):
    """An input broke a documented precondition (non-normalized heatmap, ...)."""


class SamplingError(RuntimeError):
    """A sampler could not produce a valid draw (identity with too few images, ...)."""


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/Inf during training; carries the term name."""
