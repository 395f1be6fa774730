"""Shared exception types."""


class ValidationError(ValueError):
    """Bad user input (ids out of range, malformed config, ...)."""


class GeometryError(ValueError):
    """Degenerate or inconsistent geometry."""


class ContractError(RuntimeError):
    """A cross-module contract was violated (e.g. stale solution vector)."""


class SolverError(RuntimeError):
    """Iterative solver failed; carries the final residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(RuntimeError):
    """An iteration cap was exceeded."""
