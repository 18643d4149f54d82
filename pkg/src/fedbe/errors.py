class FedBEError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedBEError, ValueError):
    """Invalid model spec, experiment config, or unknown identifier."""


class InputError(FedBEError, ValueError):
    """A call received data outside its domain (bad token id, empty set, ...)."""


class DegenerateProfileError(InputError):
    """Gradient profile carries no signal (all block norms are zero)."""


class TrainingError(FedBEError, RuntimeError):
    """A training stage failed to reach its required target."""
