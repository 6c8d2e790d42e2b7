"""
Local test statistics computed by each sensor from its sample covariance.

All statistics grow with the evidence for PU presence, so a sensor decides
"occupied" when its statistic strictly exceeds the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from .airmodel import ScenarioConfig, exponential_correlation
from .errors import ConfigError, DegenerateCovarianceError
from .numerics import hermitian_eig, hermitian_eigvalsh

logger = logging.getLogger(__name__)

MMED_CONDITION_LIMIT = 1e-14


class DetectorKind(StrEnum):
    ED = "ed"
    MED = "med"
    MMED = "mmed"
    CAV = "cav"
    EC = "ec"

    @property
    def needs_noise_power(self) -> bool:
        return self in (DetectorKind.ED, DetectorKind.MED, DetectorKind.EC)

    @property
    def needs_signal_covariance(self) -> bool:
        return self is DetectorKind.EC


@dataclass(frozen=True)
class Detector:
    """A detector kind together with the prior knowledge it relies on.

    ED and MED need the sensing noise power; EC additionally needs the signal
    covariance R_s. MMED and CAV are blind and ignore both.
    """

    kind: DetectorKind
    noise_power: float | None = None
    signal_covariance: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DetectorKind(self.kind))
        if self.kind.needs_noise_power and self.noise_power is None:
            raise ConfigError(f"{self.kind.name} requires the sensing noise power")
        if self.kind.needs_signal_covariance and self.signal_covariance is None:
            raise ConfigError("EC requires the signal covariance R_s")

    @classmethod
    def for_scenario(cls, kind: DetectorKind | str, cfg: ScenarioConfig) -> Detector:
        """Build a detector whose prior matches the scenario exactly."""
        kind = DetectorKind(kind)
        signal = None
        if kind.needs_signal_covariance:
            signal = cfg.sigma_s2 * cfg.sigma_h2 * exponential_correlation(cfg.M, cfg.rho)
        return cls(kind, noise_power=cfg.sigma_u2_sense, signal_covariance=signal)

    def ec_weights(self) -> np.ndarray:
        """W = R_s (R_s + σ̃_u² I)^{-1}."""
        signal = np.asarray(self.signal_covariance, dtype=np.complex128)
        loaded = signal + self.noise_power * np.eye(signal.shape[0])
        try:
            # R_s and R_s + σ²I commute, so the left solve gives the same W.
            return np.linalg.solve(loaded, signal)
        except np.linalg.LinAlgError as exc:
            raise DegenerateCovarianceError("R_s + noise_power * I is singular") from exc


def _as_detector(detector: Detector | DetectorKind | str) -> Detector:
    if isinstance(detector, Detector):
        return detector
    return Detector(DetectorKind(detector))


def _min_max_ratio(largest: np.ndarray, smallest: np.ndarray) -> np.ndarray:
    if np.any(smallest <= MMED_CONDITION_LIMIT * largest):
        raise DegenerateCovarianceError(
            "MMED undefined: smallest eigenvalue is at or below "
            f"{MMED_CONDITION_LIMIT:g} times the largest"
        )
    return largest / smallest


def statistic(detector: Detector | DetectorKind | str, r: np.ndarray) -> float:
    """Local test statistic of one M x M sample covariance.

    Args:
        detector: Detector with its prior, or a bare kind for the blind MMED/CAV.
        r: Hermitian PSD sample covariance.

    Returns:
        ED: trace(r)/(M σ̃_u²); MED: λ_max/σ̃_u²; MMED: λ_max/λ_min;
        CAV: Σ|r_pq| / Σ|r_pp|; EC: trace(W r).

    Raises:
        DegenerateCovarianceError: MMED on a (numerically) singular matrix.
    """
    detector = _as_detector(detector)
    r = np.asarray(r, dtype=np.complex128)
    match detector.kind:
        case DetectorKind.ED:
            return float(np.trace(r).real / (r.shape[0] * detector.noise_power))
        case DetectorKind.MED:
            eigenvalues, _ = hermitian_eig(r)
            return float(eigenvalues[0] / detector.noise_power)
        case DetectorKind.MMED:
            eigenvalues, _ = hermitian_eig(r)
            return float(_min_max_ratio(eigenvalues[0], eigenvalues[-1]))
        case DetectorKind.CAV:
            return float(np.sum(np.abs(r)) / np.sum(np.abs(np.diag(r))))
        case DetectorKind.EC:
            return float(np.sum(detector.ec_weights() * r.T).real)
    raise ConfigError(f"unknown detector kind {detector.kind!r}")


def statistics(detector: Detector | DetectorKind | str, rs: np.ndarray) -> np.ndarray:
    """Vectorized ``statistic`` over a stack of covariances of shape (..., M, M).

    Eigenvalues come from LAPACK here; ``statistic`` uses the Jacobi solver.
    """
    detector = _as_detector(detector)
    rs = np.asarray(rs, dtype=np.complex128)
    m = rs.shape[-1]
    match detector.kind:
        case DetectorKind.ED:
            return np.trace(rs, axis1=-2, axis2=-1).real / (m * detector.noise_power)
        case DetectorKind.MED:
            return hermitian_eigvalsh(rs)[..., 0] / detector.noise_power
        case DetectorKind.MMED:
            eigenvalues = hermitian_eigvalsh(rs)
            return _min_max_ratio(eigenvalues[..., 0], eigenvalues[..., -1])
        case DetectorKind.CAV:
            diagonal = np.abs(np.diagonal(rs, axis1=-2, axis2=-1)).sum(axis=-1)
            return np.abs(rs).sum(axis=(-2, -1)) / diagonal
        case DetectorKind.EC:
            weights = detector.ec_weights()
            return np.einsum("pq,...qp->...", weights, rs).real
    raise ConfigError(f"unknown detector kind {detector.kind!r}")


def local_decision(
    detector: Detector | DetectorKind | str, r: np.ndarray, threshold: float
) -> int:
    """One-bit local decision: 1 iff the statistic strictly exceeds ``threshold``."""
    if not np.isfinite(threshold):
        raise ConfigError(f"threshold must be finite, got {threshold}")
    return int(statistic(detector, r) > threshold)
