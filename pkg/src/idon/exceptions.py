"""Exception types raised across the package."""


class IdonError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(IdonError, ValueError):
    """A Cholesky pivot was non-positive."""


class SingularSystem(IdonError, ValueError):
    """The (unregularized) normal equations are rank deficient."""


class NonFiniteGradient(IdonError, FloatingPointError):
    """A gradient component is NaN or infinite."""


class SolverDiverged(IdonError, RuntimeError):
    """A reference PDE solver produced values beyond the divergence bound."""


class TrainingDiverged(IdonError, RuntimeError):
    """Training hit a non-finite loss twice in a row."""


class DegenerateComponent(IdonError, RuntimeError):
    """A mixture component collapsed to negligible weight."""


class DatasetFormatError(IdonError, ValueError):
    """A dataset container failed validation."""


class ConfigError(IdonError, ValueError):
    """An experiment configuration is invalid."""
