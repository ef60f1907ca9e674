"""Shared exception types."""


class SmoothlearnError(Exception):
    """Base class for all library errors."""


class ContractError(SmoothlearnError):
    """An argument violated a documented precondition (shape or kind mismatch)."""


class NumericError(SmoothlearnError):
    """A computation produced a non-finite value."""


class SolverError(SmoothlearnError):
    """A linear or nonlinear solver failed to converge."""


class IndefiniteMatrixError(SolverError):
    """A matrix expected to be positive definite was not."""


class ConfigError(SmoothlearnError):
    """Invalid or unknown configuration."""


class FormatError(SmoothlearnError):
    """A serialized file does not match the expected format."""
