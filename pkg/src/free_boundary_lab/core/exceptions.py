"""
File: exceptions.py
Description: Exception hierarchy shared by the solver, the Monte Carlo estimators and the runner.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""


class FreeBoundaryError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(FreeBoundaryError):
    """Invalid run configuration or an instance lacking a required capability."""


class DomainError(FreeBoundaryError, ValueError):
    """Input outside the rectangle or violating an operation's precondition."""


class NumericalFailureError(FreeBoundaryError):
    """A numerical stage could not produce a trustworthy result.

    Args:
        message: Human readable description.
        stage: Pipeline stage that failed, if known.
        residual: Worst residual observed, if meaningful.
    """

    def __init__(self, message: str, stage: str | None = None, residual: float | None = None):
        super().__init__(message)
        self.stage = stage
        self.residual = residual


class BoundaryEscapeError(NumericalFailureError):
    """The extracted boundary left (x1, x2) on [0, T1] or has no contact set."""
