"""Exception types raised across the package."""


class ClelError(Exception):
    """Base class for all package errors."""


class ConfigError(ClelError, ValueError):
    """Invalid configuration, unknown key, or shape mismatch."""


class ArgumentError(ClelError, ValueError):
    """An operation was called with arguments outside its domain."""


class DegenerateFeature(ClelError, ArithmeticError):
    """A feature vector is too close to zero to be normalized."""


class DegenerateProjection(ClelError, ArithmeticError):
    """The directional projector produced a near-zero vector."""


class DegenerateAggregate(ClelError, ArithmeticError):
    """Summed latents cancelled out below the normalization threshold."""


class DataError(ClelError, IOError):
    """A dataset file could not be read or has the wrong size."""


class ChainDiverged(ClelError, FloatingPointError):
    """An SGLD chain produced a non-finite gradient.

    Attributes:
        state: the offending chain state (detached tensor).
        step: step index within the chain, when known.
        batch_index: indices of the diverged chains within the batch.
    """

    def __init__(self, message, state=None, step=None, batch_index=None):
        super().__init__(message)
        self.state = state
        self.step = step
        self.batch_index = batch_index


class TrainingDiverged(ClelError, FloatingPointError):
    """A loss or energy became non-finite during training."""
