"""Exception types shared across the package."""


class OdemetaError(Exception):
    """Base class for all package errors."""


class DimensionError(OdemetaError, ValueError):
    """Array shapes are incompatible with an operation's contract."""


class StateError(OdemetaError, RuntimeError):
    """An object was used before the call that makes it valid (e.g. reading
    gradients before a backward sweep)."""


class EvaluationError(OdemetaError, RuntimeError):
    """A numeric evaluation produced a non-finite or otherwise unusable value."""


class SolverFailure(OdemetaError, RuntimeError):
    """An ODE solve diverged or hit its step limit where a result was required."""


class FitError(OdemetaError, RuntimeError):
    """A model fit could not be completed (e.g. kernel matrix not positive
    definite after maximum jitter)."""


class AcquisitionError(OdemetaError, RuntimeError):
    """Acquisition function evaluation failed."""


class OptimizationError(OdemetaError, RuntimeError):
    """All restarts of an inner optimization failed."""


class ConfigError(OdemetaError, ValueError):
    """Experiment configuration is malformed or references missing artifacts."""


class CheckpointError(OdemetaError, ValueError):
    """Checkpoint file is corrupt, or its version/kind does not match."""
