"""
The degenerate transceiver: one convolution with ELU and global average
pooling per sensor, noiseless over-the-air summation, and a single linear unit
with sigmoid at the FC.

For diagonal inputs σ²I its output collapses to

    T = 1 / (1 + ϖ exp(-φ Σ_k σ_k²)),

a strictly monotone function of the energy-detection sum. ``verify_proposition3``
checks that equivalence numerically on simulated slots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

try:
    import torch
    import torch.nn.functional as F
except ImportError:
    raise ImportError("torch package is required")

try:
    from pydantic import BaseModel, ConfigDict
except ImportError:
    raise ImportError("pydantic package is required")

from .airmodel import UNCORRELATED_RHO, ScenarioConfig, generate_slot, report_aircomp
from .detectors import Detector, DetectorKind, statistics
from .errors import ConfigError
from .fusion import sdf_fuse
from .numerics import RngStream, ranks_identical, spearman

logger = logging.getLogger(__name__)

ForwardMode = Literal["homogeneous", "literal"]


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, np.expm1(np.minimum(x, 0.0)))


@dataclass(frozen=True)
class SimplifiedModel:
    """Kernel ``(Λ, L, L)``, decoder weights Θ of length Λ and input size M.

    ``eta`` holds η_{i,j,λ}, the response of each kernel to the identity
    pattern; ``zeta`` its ELU average ζ_λ.
    """

    kernel: np.ndarray
    theta: np.ndarray
    m: int
    varpi: float = 1.0
    eta: np.ndarray = field(init=False, repr=False)
    zeta: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        kernel = np.asarray(self.kernel, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
            raise ConfigError(f"kernel must have shape (Λ, L, L), got {kernel.shape}")
        if theta.shape != (kernel.shape[0],):
            raise ConfigError(f"theta must have length Λ={kernel.shape[0]}, got {theta.shape}")
        if kernel.shape[1] > self.m:
            raise ConfigError(f"kernel size {kernel.shape[1]} exceeds input size {self.m}")
        if not self.varpi > 0.0:
            raise ConfigError(f"varpi must be positive, got {self.varpi}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "eta", identity_response(kernel, self.m))
        object.__setattr__(self, "zeta", self.recompute_zeta())

    @property
    def n_kernels(self) -> int:
        return self.kernel.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[1]

    @property
    def phi(self) -> float:
        """φ = Σ_λ θ_λ ζ_λ."""
        return float(self.theta @ self.zeta)

    def recompute_zeta(self) -> np.ndarray:
        return _elu(self.eta).mean(axis=(-2, -1))

    def with_varpi(self, varpi: float) -> SimplifiedModel:
        return SimplifiedModel(self.kernel, self.theta, self.m, varpi)


def identity_response(kernel: np.ndarray, m: int) -> np.ndarray:
    """η_{i,j,λ}: valid cross-correlation of each kernel with I_M.

    Entry (i, j) sums the kernel taps lying on the diagonal i + a = j + b.
    """
    kernel = np.asarray(kernel, dtype=float)
    lam, size, _ = kernel.shape
    out = m - size + 1
    eta = np.zeros((lam, out, out))
    for a in range(size):
        for b in range(size):
            # tap (a, b) hits the diagonal where i + a == j + b
            offset = a - b
            i = np.arange(out)
            j = i + offset
            valid = (j >= 0) & (j < out)
            eta[:, i[valid], j[valid]] += kernel[:, a, b][:, None]
    return eta


def random_model(
    m: int, stream: RngStream, n_kernels: int = 8, kernel_size: int = 3, phi: float = 1.0
) -> SimplifiedModel:
    """Random kernels with Θ rescaled so that φ equals ``phi``."""
    kernel = stream.normal((n_kernels, kernel_size, kernel_size))
    zeta = _elu(identity_response(kernel, m)).mean(axis=(-2, -1))
    theta = stream.normal(n_kernels)
    current = float(theta @ zeta)
    if current == 0.0:
        raise ConfigError("drawn decoder weights give φ = 0; use another stream")
    return SimplifiedModel(kernel, theta * (phi / current), m)


def scenario_model(cfg: ScenarioConfig, stream: RngStream, n_kernels: int = 8) -> SimplifiedModel:
    """Random model with φ set to the inverse of the expected H1 energy sum.

    Keeps φ Σ σ_k² near one so the sigmoid does not saturate in double precision.
    """
    expected = cfg.K * (cfg.sigma_u2_sense + cfg.sigma_s2 * cfg.sigma_h2)
    return random_model(cfg.M, stream, n_kernels=n_kernels, phi=1.0 / expected)


def simplified_statistic(model: SimplifiedModel, energies) -> float | np.ndarray:
    """T = 1 / (1 + ϖ exp(-φ Σ_k σ_k²)) over the last axis of ``energies``."""
    energies = np.asarray(energies, dtype=float)
    if np.any(energies < 0.0):
        raise ValueError("energies must be nonnegative")
    total = energies.sum(axis=-1)
    t = 1.0 / (1.0 + model.varpi * np.exp(-model.phi * total))
    return float(t) if np.ndim(t) == 0 else t


def encoder_features(
    model: SimplifiedModel, covariances, mode: ForwardMode = "homogeneous"
) -> np.ndarray:
    """Pooled encoder output S_2 of shape (K, Λ) for K real covariances (K, M, M).

    ``homogeneous`` applies σ² ELU(x / σ²) with σ² = trace/M per sensor, which
    is positively homogeneous in the input energy; ``literal`` applies ELU
    directly. The two agree when every η is nonnegative.
    """
    rs = np.asarray(covariances).real.astype(float)
    if rs.shape[-1] != model.m:
        raise ConfigError(f"model expects M={model.m}, got {rs.shape[-1]}")
    inputs = torch.from_numpy(np.ascontiguousarray(rs[:, None]))
    weight = torch.from_numpy(model.kernel[:, None])
    conv = F.conv2d(inputs, weight)
    if mode == "literal":
        activated = F.elu(conv)
    elif mode == "homogeneous":
        energy = torch.from_numpy(np.trace(rs, axis1=-2, axis2=-1) / model.m)[:, None, None, None]
        safe = torch.where(energy > 0.0, energy, torch.ones_like(energy))
        activated = torch.where(energy > 0.0, safe * F.elu(conv / safe), torch.zeros_like(conv))
    else:
        raise ConfigError(f"unknown forward mode {mode!r}")
    return activated.mean(dim=(-2, -1)).numpy()


def network_output(
    model: SimplifiedModel,
    covariances,
    mode: ForwardMode = "homogeneous",
    noise=None,
) -> float:
    """Forward pass of the degenerate network for one slot.

    The pooled features of all sensors are summed over the air (noiseless,
    perfect CSI, κ = 1), ``noise`` (length Λ, optional) is added, and the FC
    applies sigmoid(Θ·S_3 - ln ϖ).
    """
    features = encoder_features(model, covariances, mode)
    k = features.shape[0]
    link = ScenarioConfig(K=k, M=model.m, iota=1.0, kappa=1.0, snr_report_db=math.inf)
    received = report_aircomp(features.astype(np.complex128), link, RngStream(0)).aggregated
    summed = k * received.real
    if noise is not None:
        summed = summed + np.asarray(noise, dtype=float)
    logit = torch.tensor(float(model.theta @ summed) - math.log(model.varpi), dtype=torch.float64)
    return float(torch.sigmoid(logit))


def lognormal_varpi(theta, noise_variance: float) -> float:
    """E[exp(-Σ θ_λ n_λ)] for i.i.d. n_λ ~ N(0, v): exp(v ‖Θ‖² / 2)."""
    theta = np.asarray(theta, dtype=float)
    return float(np.exp(noise_variance * float(theta @ theta) / 2.0))


def estimate_varpi(theta, noise_variance: float, samples: int, stream: RngStream) -> float:
    """Monte Carlo estimate of E[exp(-Σ θ_λ n_λ)]."""
    theta = np.asarray(theta, dtype=float)
    if noise_variance == 0.0:
        return 1.0
    noise = np.sqrt(noise_variance) * stream.normal((samples, theta.size))
    return float(np.mean(np.exp(-noise @ theta)))


class EquivalenceReport(BaseModel):
    """Rank and ROC agreement between the simplified model, ED-SDF and EC-SDF."""

    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")

    trials: int
    phi: float
    varpi: float
    varpi_lognormal: float | None = None
    inverted: bool
    spearman_simplified_ed: float
    spearman_ed_ec: float
    spearman_simplified_ec: float
    ranks_identical_simplified_ed: bool
    ranks_identical_ed_ec: bool
    roc_identical_simplified_ed: bool
    roc_identical_ed_ec: bool
    pfa_grid: list[float]
    roc_simplified: list[tuple[float, float]]
    roc_ed: list[tuple[float, float]]
    roc_ec: list[tuple[float, float]]
    passed: bool


def _roc(statistic_h0: np.ndarray, statistic_h1: np.ndarray, pfa_grid) -> list[tuple[float, float]]:
    from .evaluate import calibrate_threshold

    points = []
    for target in pfa_grid:
        gamma = calibrate_threshold(statistic_h0, target, warn=False)
        points.append(
            (float(np.mean(statistic_h0 > gamma)), float(np.mean(statistic_h1 > gamma)))
        )
    return points


def verify_proposition3(
    model: SimplifiedModel,
    trials: int,
    stream: RngStream,
    cfg: ScenarioConfig | None = None,
    pfa_grid=(0.01, 0.05, 0.1, 0.2, 0.5),
    noise_variance: float = 0.0,
) -> EquivalenceReport:
    """Check that the simplified model ranks slots exactly like ED and EC with equal-gain SDF.

    Slots alternate between H0 and H1 and are drawn with uncorrelated antennas.
    Energies are σ_k² = trace(R_k)/M.

    Args:
        model: Simplified model; its M must match the scenario.
        trials: Number of slots.
        stream: Parent stream; slot i uses ``stream.child(i)``.
        cfg: Scenario (antenna correlation is overridden to the uncorrelated limit).
        pfa_grid: False-alarm targets of the ROC comparison.
        noise_variance: Reporting noise variance of n_λ used to estimate ϖ.
    """
    if trials < 2:
        raise ValueError("at least two trials are needed")
    cfg = cfg or ScenarioConfig(M=model.m)
    if cfg.M != model.m:
        raise ConfigError(f"model expects M={model.m}, scenario has M={cfg.M}")
    cfg = cfg.with_updates(rho=UNCORRELATED_RHO)

    varpi_lognormal = None
    if noise_variance > 0.0:
        varpi = estimate_varpi(model.theta, noise_variance, 100_000, stream.child(trials))
        varpi_lognormal = lognormal_varpi(model.theta, noise_variance)
        model = model.with_varpi(varpi)
        logger.info("varpi: Monte Carlo %.6g, log-normal %.6g", varpi, varpi_lognormal)

    labels = np.arange(trials) % 2
    rs = np.stack([generate_slot(cfg, int(e), stream.child(i)).covariances for i, e in enumerate(labels)])
    energies = np.trace(rs, axis1=-2, axis2=-1).real / cfg.M
    simplified = np.asarray(simplified_statistic(model, energies))
    ed = sdf_fuse(statistics(Detector.for_scenario(DetectorKind.ED, cfg), rs))
    ec = sdf_fuse(statistics(Detector.for_scenario(DetectorKind.EC, cfg), rs))

    inverted = model.phi < 0.0
    oriented = -simplified if inverted else simplified
    h0, h1 = labels == 0, labels == 1
    roc_simplified = _roc(oriented[h0], oriented[h1], pfa_grid)
    roc_ed = _roc(ed[h0], ed[h1], pfa_grid)
    roc_ec = _roc(ec[h0], ec[h1], pfa_grid)

    same_simplified_ed = ranks_identical(oriented, ed)
    same_ed_ec = ranks_identical(ed, ec)
    if inverted:
        logger.warning("φ = %.6g < 0: the simplified statistic ranks slots in reverse", model.phi)
    return EquivalenceReport(
        trials=trials,
        phi=model.phi,
        varpi=model.varpi,
        varpi_lognormal=varpi_lognormal,
        inverted=inverted,
        spearman_simplified_ed=spearman(simplified, ed),
        spearman_ed_ec=spearman(ed, ec),
        spearman_simplified_ec=spearman(simplified, ec),
        ranks_identical_simplified_ed=same_simplified_ed,
        ranks_identical_ed_ec=same_ed_ec,
        roc_identical_simplified_ed=roc_simplified == roc_ed,
        roc_identical_ed_ec=roc_ed == roc_ec,
        pfa_grid=[float(p) for p in pfa_grid],
        roc_simplified=roc_simplified,
        roc_ed=roc_ed,
        roc_ec=roc_ec,
        passed=same_simplified_ed and same_ed_ec and not inverted,
    )
