"""Unit tests for hard and soft decision fusion."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from icc_sensing.airmodel import ScenarioConfig, bpsk_channel
from icc_sensing.fusion import (
    ClampCounter,
    QuantizerSpec,
    bits_to_codes,
    calibrate_quantizer,
    codes_to_bits,
    dequantize,
    hdf_fuse,
    hdf_theoretical_pd,
    hdf_theoretical_pfa,
    majority_threshold,
    quantize,
    quantize_transmit,
    sdf_fuse,
)

PERFECT_LINK = ScenarioConfig(iota=1.0, k_factor_db=math.inf, snr_report_db=math.inf)


@pytest.mark.unit
class TestFusionRules:
    """Test cases for the majority and equal-gain rules."""

    @pytest.mark.parametrize(
        "votes,expected",
        [([1, 1, 1, 1, 0, 0], 1), ([1, 1, 1, 0, 0, 0], 0), ([0, 0, 0], 0), ([1], 1), ([1, 0], 0)],
    )
    def test_majority(self, votes, expected):
        """Test the majority rule on small vote vectors."""
        assert hdf_fuse(votes) == expected

    def test_majority_threshold(self):
        """Test the winning vote count for odd and even K."""
        assert [majority_threshold(k) for k in (1, 2, 3, 6, 7)] == [1, 2, 2, 4, 4]

    def test_batched_majority(self):
        """Test fusion over the last axis of a batch."""
        votes = np.array([[1, 1, 0], [0, 1, 0]])
        np.testing.assert_array_equal(hdf_fuse(votes), [1, 0])

    def test_empty_votes(self):
        """Test that fusing nothing is an error."""
        with pytest.raises(ValueError):
            hdf_fuse(np.zeros((2, 0)))

    def test_soft_sum(self):
        """Test the equal-gain sum."""
        assert sdf_fuse([0.5, 1.5, 2.0]) == pytest.approx(4.0)
        np.testing.assert_allclose(sdf_fuse(np.ones((4, 3))), [3.0] * 4)


@pytest.mark.unit
class TestQuantizer:
    """Test cases for quantization and the bit link."""

    def test_spec_validation(self):
        """Test range and bit-width checks."""
        with pytest.raises(ValidationError):
            QuantizerSpec(lo=1.0, hi=1.0)
        with pytest.raises(ValidationError):
            QuantizerSpec(bits=0, lo=0.0, hi=1.0)
        q = QuantizerSpec(bits=4, lo=0.0, hi=2.0)
        assert (q.levels, q.step) == (16, 0.125)

    def test_high_bit_flip(self):
        """Test that flipping the most significant bit moves the value by half the range."""
        q = QuantizerSpec(bits=8, lo=0.0, hi=1.0)
        bits = codes_to_bits(quantize(0.5, q), q.bits)
        assert bits[0] == 1
        bits[0] = 0
        moved = dequantize(bits_to_codes(bits), q)
        assert dequantize(quantize(0.5, q), q) - moved == pytest.approx(0.5)

    def test_bits_msb_first(self):
        """Test the bit order of a known code."""
        np.testing.assert_array_equal(codes_to_bits(np.array(6), 4), [0, 1, 1, 0])
        assert bits_to_codes([0, 1, 1, 0]) == 6

    def test_clamping_counted(self):
        """Test that out-of-range values clamp to the edge codes and are tallied."""
        q = QuantizerSpec(bits=3, lo=0.0, hi=1.0)
        counter = ClampCounter()
        codes = quantize([-5.0, 0.2, 1.0, 7.0], q, counter)
        np.testing.assert_array_equal(codes, [0, 1, 7, 7])
        assert (counter.clamped, counter.transmitted) == (2, 4)
        assert counter.rate == pytest.approx(0.5)
        assert ClampCounter().rate == 0.0

    def test_code_centers_fixed(self):
        """Test that re-quantizing a cell center returns its code."""
        q = QuantizerSpec(bits=6, lo=-2.0, hi=3.0)
        codes = np.arange(q.levels)
        np.testing.assert_array_equal(quantize(dequantize(codes, q), q), codes)

    def test_noiseless_link_error(self, stream):
        """Test that a noiseless link reconstructs to within half a step."""
        q = QuantizerSpec(bits=8, lo=0.0, hi=10.0)
        t = stream.uniform(0.0, 10.0, 500)
        out = quantize_transmit(t, q, PERFECT_LINK, stream)
        assert out.shape == t.shape
        assert np.max(np.abs(out - t)) <= q.step / 2 + 1e-12

    def test_scalar_passthrough(self, stream):
        """Test that a scalar statistic comes back as a float."""
        q = QuantizerSpec(bits=8, lo=0.0, hi=1.0)
        assert isinstance(quantize_transmit(0.3, q, PERFECT_LINK, stream), float)

    def test_calibrated_range(self):
        """Test percentile calibration and padding of constant input."""
        q = calibrate_quantizer(np.linspace(0.0, 100.0, 100_001), bits=5)
        assert q.lo == pytest.approx(0.1)
        assert q.hi == pytest.approx(99.9)
        assert q.bits == 5
        flat = calibrate_quantizer(np.full(10, 3.0))
        assert flat.lo < 3.0 < flat.hi


@pytest.mark.unit
class TestHdfTheory:
    """Test cases for the closed-form majority-vote probabilities."""

    def test_known_values(self):
        """Test the anchor values of the closed form."""
        assert hdf_theoretical_pd(1.0, -3.0, 6) == pytest.approx(0.9454, abs=1e-4)
        assert hdf_theoretical_pd(0.5, math.inf, 6) == pytest.approx(0.34375, abs=1e-8)
        assert hdf_theoretical_pd(1.0, -math.inf, 6) == pytest.approx(0.34375, abs=1e-8)
        assert hdf_theoretical_pd(1.0, math.inf, 6) == pytest.approx(1.0)

    def test_monotone_in_link_quality(self):
        """Test that P_d grows with reporting SNR when sensors mostly detect."""
        values = [hdf_theoretical_pd(0.9, snr, 6) for snr in np.arange(-10.0, 11.0)]
        assert np.all(np.diff(values) >= 0.0)

    def test_monotone_in_local_pd(self):
        """Test that P_d grows with the local detection probability."""
        values = [hdf_theoretical_pd(p, 0.0, 7) for p in np.linspace(0.0, 1.0, 21)]
        assert np.all(np.diff(values) >= 0.0)

    def test_false_alarm_form(self):
        """Test that the false-alarm form applies the same rule to P_fa."""
        assert hdf_theoretical_pfa(0.1, 3.0, 5) == pytest.approx(hdf_theoretical_pd(0.1, 3.0, 5))
        assert hdf_theoretical_pfa(0.0, math.inf, 5) == 0.0

    def test_invalid_inputs(self):
        """Test probability and sensor-count checks."""
        with pytest.raises(ValueError):
            hdf_theoretical_pd(1.5, 0.0, 6)
        with pytest.raises(ValueError):
            hdf_theoretical_pd(0.5, 0.0, 0)

    @pytest.mark.slow
    @pytest.mark.parametrize("snr_db", [-9.0, -6.0, -3.0, 0.0, 3.0])
    def test_simulation_matches_theory(self, stream, snr_db):
        """Test simulated majority fusion over the BPSK link against the closed form."""
        cfg = ScenarioConfig(K=6, iota=1.0, k_factor_db=math.inf, snr_report_db=snr_db)
        trials = 100_000
        votes = (stream.uniform(0.0, 1.0, (trials, 6)) < 0.7).astype(np.int8)
        fused = hdf_fuse(bpsk_channel(votes, cfg, stream))
        theory = hdf_theoretical_pd(0.7, snr_db, 6)
        stderr = math.sqrt(theory * (1.0 - theory) / trials)
        assert abs(fused.mean() - theory) <= 4 * stderr
