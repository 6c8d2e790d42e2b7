"""
Physical-layer simulation: primary-user signal, sensing channel, sample
covariances, and the two reporting channels (orthogonal and over-the-air).

Reporting uses are described by ``ChannelDraws`` so that the same realized
fades, estimates and noise can be replayed through the numpy channel here and
through the differentiable AirComp layer in ``neuralsc``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Literal

import numpy as np

try:
    from pydantic import BaseModel, ConfigDict, Field, model_validator
except ImportError:
    raise ImportError("pydantic package is required")

from .errors import ConfigError, DegenerateEstimateError
from .numerics import RngStream, cholesky, q_function

logger = logging.getLogger(__name__)

DEEP_FADE_LIMIT = 1e-12
# Neighbouring-antenna correlation standing in for R_h = I in the rho -> 0 limit.
UNCORRELATED_RHO = 1e-300

ReportingMode = Literal["aircomp", "orthogonal"]


def db_to_linear(db: float) -> float:
    if db == math.inf:
        return math.inf
    if db == -math.inf:
        return 0.0
    return 10.0 ** (db / 10.0)


def linear_to_db(value: float) -> float:
    if value == 0.0:
        return -math.inf
    if value == math.inf:
        return math.inf
    return 10.0 * math.log10(value)


def _noise_for_snr(signal_power: float, snr_db: float) -> float:
    gain = db_to_linear(snr_db)
    if gain == 0.0:
        return math.inf
    return signal_power / gain


def _resolve_snr(
    data: dict[str, Any], snr_key: str, noise_key: str, signal_power: float, default_snr: float
) -> None:
    """Fill in whichever of (snr, noise power) is missing and check they agree."""
    snr = data.get(snr_key)
    noise = data.get(noise_key)
    if snr is None and noise is None:
        snr = default_snr
    if snr is not None:
        derived = _noise_for_snr(signal_power, float(snr))
        if noise is not None and not math.isclose(float(noise), derived, rel_tol=1e-9, abs_tol=0.0):
            raise ValueError(
                f"{noise_key}={noise} is inconsistent with {snr_key}={snr} "
                f"(expected {derived:.6g})"
            )
        data[snr_key] = float(snr)
        data[noise_key] = derived
    else:
        noise = float(noise)
        data[snr_key] = math.inf if noise == 0.0 else linear_to_db(signal_power / noise)
        data[noise_key] = noise


class ScenarioConfig(BaseModel):
    """All physical-layer parameters of a sensing scenario.

    Either an SNR or the matching noise power may be given; the other is
    derived so that Γ̃ = 10 lg(σ̃_h² σ_s² / σ̃_u²) and Γ̂ = 10 lg(κ / σ̂_u²)
    always hold among the stored fields.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")

    K: int = Field(6, ge=1, description="sensor count")
    M: int = Field(28, ge=1, description="antennas per sensor")
    N: int = Field(100, ge=1, description="samples per sensing slot")
    sigma_s2: float = Field(1.0, ge=0.0)
    sigma_h2: float = Field(1.0, ge=0.0)
    sigma_u2_sense: float = Field(ge=0.0)
    rho: float = Field(0.5, gt=0.0, lt=1.0)
    snr_sense_db: float
    snr_report_db: float
    kappa: float = Field(1.0, gt=0.0)
    sigma_u2_report: float = Field(ge=0.0)
    k_factor_db: float = 0.0
    iota: float = Field(0.9, gt=0.0, le=1.0)
    nu: float = Field(2.0, ge=0.0)
    distances: list[float] | None = None
    snr_sense_db_per_sensor: list[float] | None = None

    @model_validator(mode="before")
    @classmethod
    def _derive_noise_powers(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        sensing_power = float(data.get("sigma_h2", 1.0)) * float(data.get("sigma_s2", 1.0))
        _resolve_snr(data, "snr_sense_db", "sigma_u2_sense", sensing_power, -15.0)
        _resolve_snr(data, "snr_report_db", "sigma_u2_report", float(data.get("kappa", 1.0)), 0.0)
        return data

    @model_validator(mode="after")
    def _check_per_sensor_lengths(self) -> ScenarioConfig:
        if self.distances is not None:
            if len(self.distances) != self.K:
                raise ValueError(f"distances has {len(self.distances)} entries, expected K={self.K}")
            if any(d <= 0 for d in self.distances):
                raise ValueError("distances must be positive")
        if self.snr_sense_db_per_sensor is not None and len(self.snr_sense_db_per_sensor) != self.K:
            raise ValueError(
                f"snr_sense_db_per_sensor has {len(self.snr_sense_db_per_sensor)} entries, "
                f"expected K={self.K}"
            )
        return self

    def with_updates(self, **changes: Any) -> ScenarioConfig:
        """Copy with ``changes`` applied, re-deriving the dependent noise powers."""
        data = self.model_dump()
        if {"snr_sense_db", "sigma_s2", "sigma_h2"} & changes.keys():
            data.pop("sigma_u2_sense")
        if "sigma_u2_sense" in changes:
            data.pop("snr_sense_db")
        if {"snr_report_db", "kappa"} & changes.keys():
            data.pop("sigma_u2_report")
        if "sigma_u2_report" in changes:
            data.pop("snr_report_db")
        if "K" in changes and changes["K"] != self.K:
            if "distances" not in changes:
                if self.distances is not None and any(d != 1.0 for d in self.distances):
                    raise ConfigError("changing K requires new distances for non-unit geometry")
                data["distances"] = None
            if "snr_sense_db_per_sensor" not in changes:
                data["snr_sense_db_per_sensor"] = None
        data.update(changes)
        return ScenarioConfig.model_validate(data)

    def distance_array(self) -> np.ndarray:
        if self.distances is None:
            return np.ones(self.K)
        return np.asarray(self.distances, dtype=float)

    def sensing_noise_powers(self) -> np.ndarray:
        """Per-sensor σ̃_u², honouring the optional per-sensor SNR override."""
        if self.snr_sense_db_per_sensor is None:
            return np.full(self.K, self.sigma_u2_sense)
        power = self.sigma_h2 * self.sigma_s2
        return np.array([_noise_for_snr(power, snr) for snr in self.snr_sense_db_per_sensor])


@dataclass(frozen=True)
class CovarianceSample:
    """One labeled sensing slot: K sample covariances R_k and the PU state e."""

    covariances: np.ndarray
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class ChannelDraws:
    """Realized quantities of one reporting use.

    ``gains`` is the composite d̂^{-ν/2} ĥ_k b̂_k per sensor. ``noise`` has shape
    ``(..., D)`` for AirComp and ``(..., K, D)`` for orthogonal reporting.
    """

    fades: np.ndarray
    estimates: np.ndarray
    precoders: np.ndarray
    gains: np.ndarray
    noise: np.ndarray
    mode: ReportingMode
    redraws: int = 0


@dataclass(frozen=True)
class ReportedSymbols:
    """What the fusion center receives: per-sensor vectors or one aggregate."""

    channel_draws: ChannelDraws
    per_sensor: np.ndarray | None = None
    aggregated: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.per_sensor is None) == (self.aggregated is None):
            raise ValueError("exactly one of per_sensor / aggregated must be present")


def exponential_correlation(m: int, rho: float) -> np.ndarray:
    """Exponential antenna-correlation matrix [R]_{p,q} = rho^{|p-q|}."""
    index = np.arange(m)
    return float(rho) ** np.abs(np.subtract.outer(index, index)).astype(float)


@lru_cache(maxsize=32)
def _correlation_factor(m: int, rho: float) -> np.ndarray:
    factor = cholesky(exponential_correlation(m, rho))
    factor.setflags(write=False)
    return factor


def draw_sensing_channel(cfg: ScenarioConfig, stream: RngStream) -> np.ndarray:
    """Draw h̃_k ~ CN(0, σ̃_h² R̃_h) independently for each sensor.

    Returns:
        Complex array of shape (K, M).
    """
    factor = _correlation_factor(cfg.M, cfg.rho)
    w = stream.complex_normal((cfg.K, cfg.M))
    return np.sqrt(cfg.sigma_h2) * (w @ factor.T)


def generate_slot(cfg: ScenarioConfig, label: int, stream: RngStream) -> CovarianceSample:
    """Simulate one sensing slot and return the K sample covariance matrices.

    Under e=1 every sensor observes the same PU samples s(n) through its own
    channel h̃_k; under e=0 only noise is observed.
    """
    noise_std = np.sqrt(cfg.sensing_noise_powers())
    x = stream.complex_normal((cfg.K, cfg.N, cfg.M)) * noise_std[:, None, None]
    if label:
        channel = draw_sensing_channel(cfg, stream)
        signal = np.sqrt(cfg.sigma_s2) * stream.complex_normal(cfg.N)
        x = x + channel[:, None, :] * signal[None, :, None]
    covariances = np.einsum("knp,knq->kpq", x, x.conj()) / cfg.N
    return CovarianceSample(covariances=covariances, label=int(label))


def estimate_channel(
    h_true, iota: float, stream: RngStream | None = None, error=None
) -> np.ndarray:
    """Imperfect channel estimate h̄ under ĥ = ι h̄ + sqrt(1-ι²) v̂.

    Args:
        h_true: Realized fade(s) ĥ_k.
        iota: Correlation coefficient ι in (0, 1].
        stream: Source of the estimation error v̂ ~ CN(0, 1).
        error: Explicit v̂ (same shape as ``h_true``) instead of drawing one.

    Raises:
        DegenerateEstimateError: for ι <= 0.
    """
    if not iota > 0.0:
        raise DegenerateEstimateError(f"iota must be positive, got {iota}")
    if iota > 1.0:
        raise ConfigError(f"iota must not exceed 1, got {iota}")
    h_true = np.asarray(h_true, dtype=np.complex128)
    if error is None:
        if stream is None:
            raise ValueError("either a stream or an explicit error term is required")
        error = stream.complex_normal(h_true.shape)
    return (h_true - np.sqrt(1.0 - iota**2) * np.asarray(error)) / iota


def _rician_amplitudes(k_factor_db: float) -> tuple[float, float]:
    if k_factor_db == math.inf:
        return 1.0, 0.0
    k_linear = db_to_linear(k_factor_db)
    return math.sqrt(k_linear / (k_linear + 1.0)), math.sqrt(1.0 / (k_linear + 1.0))


def draw_reporting_fade(
    cfg: ScenarioConfig, stream: RngStream, size: int | tuple[int, ...] = ()
) -> np.ndarray:
    """Rician fade with K-factor k_c, uniform LoS phase and E|ĥ|² = 1."""
    los, scatter = _rician_amplitudes(cfg.k_factor_db)
    phase = stream.uniform(0.0, 2.0 * np.pi, size)
    fade = los * np.exp(1j * phase)
    if scatter > 0.0:
        fade = fade + scatter * stream.complex_normal(size)
    return fade


def _draw_fades_and_estimates(
    cfg: ScenarioConfig, stream: RngStream, shape: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray, int]:
    fades = np.asarray(draw_reporting_fade(cfg, stream, shape), dtype=np.complex128)
    estimates = estimate_channel(fades, cfg.iota, stream)
    redraws = 0
    deep = np.abs(estimates) < DEEP_FADE_LIMIT
    while np.any(deep):
        count = int(np.count_nonzero(deep))
        redraws += count
        logger.debug("redrawing %d deep-faded reporting channel(s)", count)
        fresh = np.asarray(draw_reporting_fade(cfg, stream, (count,)), dtype=np.complex128)
        fades[deep] = fresh
        estimates[deep] = estimate_channel(fresh, cfg.iota, stream)
        deep = np.abs(estimates) < DEEP_FADE_LIMIT
    if redraws:
        logger.warning("deep-fade guard redrew %d of %d reporting fades", redraws, fades.size)
    return fades, estimates, redraws


def _precoders(estimates: np.ndarray, cfg: ScenarioConfig, distances: np.ndarray) -> np.ndarray:
    power = estimates.real**2 + estimates.imag**2
    return distances ** (cfg.nu / 2.0) * np.sqrt(cfg.kappa) * estimates.conj() / power


def _composite_gains(
    fades: np.ndarray, estimates: np.ndarray, cfg: ScenarioConfig, distances: np.ndarray
) -> np.ndarray:
    # Grouped so that perfect CSI and unit distances give exactly sqrt(kappa).
    power = estimates.real**2 + estimates.imag**2
    scale = distances ** (-cfg.nu / 2.0) * np.sqrt(cfg.kappa) * distances ** (cfg.nu / 2.0)
    product = fades * estimates.conj()
    return scale * (product.real / power + 1j * (product.imag / power))


def _complex_noise(variance: float, stream: RngStream, shape: tuple[int, ...]) -> np.ndarray:
    w = stream.complex_normal(shape)
    if variance == 0.0:
        return np.zeros(shape, dtype=np.complex128)
    with np.errstate(invalid="ignore", over="ignore"):
        return np.sqrt(variance) * w


def draw_reporting_channel(
    cfg: ScenarioConfig,
    stream: RngStream,
    symbols: int,
    mode: ReportingMode = "aircomp",
    batch: tuple[int, ...] = (),
) -> ChannelDraws:
    """Draw fades, estimates, precoders and noise for one reporting use per batch entry."""
    fades, estimates, redraws = _draw_fades_and_estimates(cfg, stream, (*batch, cfg.K))
    distances = cfg.distance_array()
    noise_shape = (*batch, symbols) if mode == "aircomp" else (*batch, cfg.K, symbols)
    return ChannelDraws(
        fades=fades,
        estimates=estimates,
        precoders=_precoders(estimates, cfg, distances),
        gains=_composite_gains(fades, estimates, cfg, distances),
        noise=_complex_noise(cfg.sigma_u2_report, stream, noise_shape),
        mode=mode,
        redraws=redraws,
    )


def _check_symbols(y: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim < 2 or y.shape[-2] != cfg.K:
        raise ConfigError(f"expected symbols of shape (..., K={cfg.K}, D), got {y.shape}")
    return y


def report_orthogonal(
    y: np.ndarray, cfg: ScenarioConfig, stream: RngStream, draws: ChannelDraws | None = None
) -> ReportedSymbols:
    """Each sensor on its own subchannel: z^c_k = d̂^{-ν/2} ĥ_k b̂_k y_k + û_k.

    Args:
        y: Complex symbols of shape (..., K, D).
        cfg: Scenario supplying κ, σ̂_u², k_c, ι, ν and distances.
        stream: Source of fresh fades and noise.
        draws: Replay these realized draws instead of drawing new ones.
    """
    y = _check_symbols(y, cfg)
    if draws is None:
        draws = draw_reporting_channel(cfg, stream, y.shape[-1], "orthogonal", y.shape[:-2])
    received = draws.gains[..., None] * y + draws.noise
    return ReportedSymbols(channel_draws=draws, per_sensor=received)


def report_aircomp(
    y: np.ndarray, cfg: ScenarioConfig, stream: RngStream, draws: ChannelDraws | None = None
) -> ReportedSymbols:
    """Simultaneous transmission: z = (1/K) Σ_k d̂^{-ν/2} ĥ_k b̂_k y_k + û.

    The noise is added once, outside the 1/K average.
    """
    y = _check_symbols(y, cfg)
    if draws is None:
        draws = draw_reporting_channel(cfg, stream, y.shape[-1], "aircomp", y.shape[:-2])
    superposed = np.sum(draws.gains[..., None] * y, axis=-2) / cfg.K
    return ReportedSymbols(channel_draws=draws, aggregated=superposed + draws.noise)


@dataclass(frozen=True)
class BpskDraws:
    """Per-bit composite gains and real noise of a BPSK reporting link."""

    gains: np.ndarray
    noise: np.ndarray


def draw_bpsk(cfg: ScenarioConfig, stream: RngStream, shape: tuple[int, ...]) -> BpskDraws:
    """Draw one precoded fade and one noise sample per bit (path loss cancels)."""
    fades, estimates, _ = _draw_fades_and_estimates(cfg, stream, tuple(shape))
    gains = _composite_gains(fades, estimates, cfg, np.ones(1))
    noise = _complex_noise(cfg.sigma_u2_report, stream, tuple(shape))
    return BpskDraws(gains=gains, noise=noise)


def apply_bpsk(bits: np.ndarray, draws: BpskDraws) -> np.ndarray:
    """Map bits to ±1, pass them through the drawn link, detect on the real part."""
    bits = np.asarray(bits)
    symbols = 1.0 - 2.0 * bits.astype(float)
    with np.errstate(invalid="ignore"):
        received = (draws.gains * symbols).real + draws.noise.real
    return (received < 0.0).astype(np.int8)


def bpsk_channel(bits: np.ndarray, cfg: ScenarioConfig, stream: RngStream) -> np.ndarray:
    """Send bits over the precoded Rician reporting link with hard detection."""
    bits = np.asarray(bits)
    return apply_bpsk(bits, draw_bpsk(cfg, stream, bits.shape))


def bpsk_theoretical_ber(snr_report_db: float) -> float:
    """Bit error rate Q(sqrt(2 Γ̂)) of BPSK over an ideal (AWGN) reporting link."""
    return float(q_function(np.sqrt(2.0 * db_to_linear(snr_report_db))))


def bpsk_error_rate_importance(
    cfg: ScenarioConfig, n_bits: int, stream: RngStream
) -> tuple[float, float]:
    """Importance-sampled BPSK bit error rate and its standard error.

    The real noise component is drawn from a Gaussian whose mean sits on the
    decision boundary of each bit, and every error is weighted by the
    likelihood ratio back to the true noise law.
    """
    fades, estimates, _ = _draw_fades_and_estimates(cfg, stream, (n_bits,))
    signal = _composite_gains(fades, estimates, cfg, np.ones(1)).real
    variance = cfg.sigma_u2_report / 2.0
    if variance == 0.0:
        errors = (signal < 0.0).astype(float)
        return float(errors.mean()), 0.0
    if variance == math.inf:
        return 0.5, 0.0
    shift = -signal
    sample = shift + np.sqrt(variance) * stream.normal(n_bits)
    weights = np.exp((shift**2 - 2.0 * shift * sample) / (2.0 * variance))
    contributions = np.where(sample < -signal, weights, 0.0)
    return float(contributions.mean()), float(contributions.std(ddof=1) / np.sqrt(n_bits))
