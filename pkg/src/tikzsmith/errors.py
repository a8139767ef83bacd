"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TikzsmithError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(TikzsmithError):
    """A configuration value is outside its legal range."""


class ContractViolationError(TikzsmithError):
    """A caller broke a documented precondition."""


class GatewayError(TikzsmithError):
    """Transport-level failure talking to a policy or embed server."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class ProtocolError(TikzsmithError):
    """The remote endpoint answered, but not in the documented shape."""


class EngineMissingError(TikzsmithError):
    """The configured LaTeX engine binary is not available."""


class EmptySearchError(TikzsmithError):
    """A search ended without completing a single simulation."""

    def __init__(self, trace):
        super().__init__("search completed zero simulations")
        self.trace = trace


class DegenerateEmbeddingError(TikzsmithError):
    """An embedding has zero norm, so cosine similarity is undefined."""


class DegeneratePcaError(TikzsmithError):
    """All centered vectors are (numerically) identical; no principal axis."""


class TransportSolveError(TikzsmithError):
    """The transportation solve failed to reach a feasible optimum."""

    def __init__(self, message: str, row_residual: float = 0.0, col_residual: float = 0.0):
        super().__init__(message)
        self.row_residual = row_residual
        self.col_residual = col_residual


class UndefinedCorrelationError(TikzsmithError):
    """Correlation is undefined (constant input vector)."""
