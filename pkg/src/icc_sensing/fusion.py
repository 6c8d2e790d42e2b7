"""
Fusion at the FC: majority-rule hard decisions, equal-gain soft combining of
quantized statistics sent over the BPSK bit channel, and the closed-form
majority-vote detection probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

try:
    from pydantic import BaseModel, ConfigDict, Field, model_validator
except ImportError:
    raise ImportError("pydantic package is required")

from .airmodel import ScenarioConfig, bpsk_channel, bpsk_theoretical_ber
from .numerics import RngStream

logger = logging.getLogger(__name__)


class QuantizerSpec(BaseModel):
    """Uniform quantizer over ``[lo, hi]`` with ``2**bits`` cells."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    bits: int = Field(8, ge=1, le=32)
    lo: float
    hi: float

    @model_validator(mode="after")
    def _check_range(self) -> QuantizerSpec:
        if not self.hi > self.lo:
            raise ValueError(f"quantizer range requires hi > lo, got lo={self.lo}, hi={self.hi}")
        return self

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.levels


@dataclass
class ClampCounter:
    """Running count of statistics that fell outside the quantizer range."""

    clamped: int = 0
    transmitted: int = 0

    @property
    def rate(self) -> float:
        return self.clamped / self.transmitted if self.transmitted else 0.0


def majority_threshold(k: int) -> int:
    """Smallest vote count that wins: ceil((K+1)/2)."""
    return k // 2 + 1


def hdf_fuse(bits_received) -> int | np.ndarray:
    """Majority rule over the last axis of the received votes."""
    votes = np.asarray(bits_received)
    k = votes.shape[-1]
    if k < 1:
        raise ValueError("at least one vote is required")
    fused = (np.count_nonzero(votes, axis=-1) >= majority_threshold(k)).astype(np.int8)
    return int(fused) if fused.ndim == 0 else fused


def sdf_fuse(statistics_received) -> float | np.ndarray:
    """Equal-gain combining: the unweighted sum over the last axis."""
    fused = np.sum(np.asarray(statistics_received, dtype=float), axis=-1)
    return float(fused) if np.ndim(fused) == 0 else fused


def quantize(t, q: QuantizerSpec, counter: ClampCounter | None = None) -> np.ndarray:
    """Integer codes in [0, 2**bits - 1]; values outside [lo, hi] are clamped."""
    t = np.asarray(t, dtype=float)
    if counter is not None:
        outside = int(np.count_nonzero((t < q.lo) | (t > q.hi)))
        counter.clamped += outside
        counter.transmitted += t.size
        if outside:
            logger.debug("clamped %d of %d statistics to [%g, %g]", outside, t.size, q.lo, q.hi)
    codes = np.floor((t - q.lo) / (q.hi - q.lo) * q.levels)
    return np.clip(codes, 0, q.levels - 1).astype(np.int64)


def dequantize(codes, q: QuantizerSpec) -> np.ndarray:
    """Map each code to the center of its cell."""
    return q.lo + (np.asarray(codes, dtype=float) + 0.5) * q.step


def codes_to_bits(codes, bits: int) -> np.ndarray:
    """Binary digits along a new trailing axis, most significant first."""
    shifts = np.arange(bits - 1, -1, -1)
    return ((np.asarray(codes, dtype=np.int64)[..., None] >> shifts) & 1).astype(np.int8)


def bits_to_codes(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    weights = 1 << np.arange(bits.shape[-1] - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def quantize_transmit(
    t,
    q: QuantizerSpec,
    cfg: ScenarioConfig,
    stream: RngStream,
    counter: ClampCounter | None = None,
):
    """Quantize, send the bits over the BPSK reporting link and dequantize.

    Args:
        t: Statistic(s) to report.
        q: Quantizer whose range the statistic is clamped to.
        cfg: Scenario describing the reporting link.
        stream: Source of the per-bit fades and noise.
        counter: Optional tally of clamped values.

    Returns:
        The value(s) the FC reconstructs, with the shape of ``t``.
    """
    sent = codes_to_bits(quantize(t, q, counter), q.bits)
    received = bpsk_channel(sent, cfg, stream)
    out = dequantize(bits_to_codes(received), q)
    return float(out) if out.ndim == 0 else out


def calibrate_quantizer(
    statistics_observed, bits: int = 8, lower: float = 0.1, upper: float = 99.9
) -> QuantizerSpec:
    """Quantizer spanning the ``lower``/``upper`` percentiles of observed statistics."""
    lo, hi = np.percentile(np.asarray(statistics_observed, dtype=float), [lower, upper])
    if not hi > lo:
        pad = max(abs(lo), 1.0) * 1e-6
        lo, hi = lo - pad, hi + pad
    return QuantizerSpec(bits=bits, lo=float(lo), hi=float(hi))


def _majority_probability(p_vote: float, snr_report_db: float, k: int) -> float:
    if not 0.0 <= p_vote <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p_vote}")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    p_error = bpsk_theoretical_ber(snr_report_db)
    p_one = p_vote * (1.0 - p_error) + (1.0 - p_vote) * p_error
    return float(stats.binom.sf(majority_threshold(k) - 1, k, p_one))


def hdf_theoretical_pd(p_local: float, snr_report_db: float, k: int) -> float:
    """Majority-rule detection probability over K ideal-fading BPSK reports.

    Each sensor votes 1 with probability ``p_local``; its vote arrives flipped
    with probability Q(sqrt(2 Γ̂)).
    """
    return _majority_probability(p_local, snr_report_db, k)


def hdf_theoretical_pfa(p_local_fa: float, snr_report_db: float, k: int) -> float:
    """Global false-alarm probability of the same rule under H0."""
    return _majority_probability(p_local_fa, snr_report_db, k)
