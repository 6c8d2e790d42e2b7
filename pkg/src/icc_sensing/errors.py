"""Exception hierarchy shared by every icc_sensing module."""

from __future__ import annotations


class IccSensingError(Exception):
    """Base class for all errors raised by the toolkit."""


class ConfigError(IccSensingError):
    """Invalid or mutually inconsistent configuration."""


class NumericsError(IccSensingError):
    """A linear-algebra routine could not produce a valid result."""


class NotHermitianError(NumericsError):
    """Input matrix is not Hermitian within tolerance."""


class NotPositiveSemidefiniteError(NumericsError):
    """Cholesky factorization met a negative pivot."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive semi-definite: pivot {pivot} = {value:.3e}")
        self.pivot = pivot
        self.value = value


class ConvergenceError(NumericsError):
    """Iterative solver stopped at its sweep cap."""

    def __init__(self, sweeps: int, residual: float):
        super().__init__(
            f"Jacobi eigensolver did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


class DegenerateCovarianceError(IccSensingError):
    """Covariance too close to singular for a ratio statistic."""


class DegenerateEstimateError(IccSensingError):
    """Channel estimate model cannot be inverted (iota = 0)."""


class CheckpointError(IccSensingError):
    """Checkpoint file is malformed or does not match its architecture."""


class TrainingDivergedError(IccSensingError):
    """A forward pass produced a non-finite value."""

    def __init__(self, layer: str, detail: str = ""):
        message = f"non-finite values produced by layer '{layer}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.layer = layer
