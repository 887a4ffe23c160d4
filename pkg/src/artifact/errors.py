"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class ArtifactError(Exception):
    """Base class for every error raised by the package."""


class DomainError(ArtifactError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(ArtifactError, ValueError):
    """A documented precondition of an operation is violated."""


class SolverError(ArtifactError, RuntimeError):
    """A numerical solver failed to reach its tolerance.

    Attributes
    ----------
    error_estimate : float
        Last error estimate attained before giving up.
    """

    def __init__(self, message: str, error_estimate: float = float("nan")):
        super().__init__(f"{message} (attained error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


class FactorizationError(ArtifactError, ArithmeticError):
    """Cholesky factorization met a non-positive pivot."""

    def __init__(self, pivot: int):
        super().__init__(f"covariance matrix is not positive definite at pivot {pivot}")
        self.pivot = pivot


class InadmissibleStepError(ArtifactError, ArithmeticError):
    """An implicit step violates its contraction margin."""

    def __init__(self, margin: float):
        super().__init__(f"implicit step contraction factor {margin:.4f} exceeds 0.9")
        self.margin = margin
