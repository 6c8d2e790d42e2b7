"""Unit tests for the simplified transceiver and its energy-detector equivalence."""

import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from icc_sensing.airmodel import ScenarioConfig
from icc_sensing.errors import ConfigError
from icc_sensing.numerics import RngStream, ranks_identical
from icc_sensing.simplified import (
    EquivalenceReport,
    SimplifiedModel,
    encoder_features,
    estimate_varpi,
    identity_response,
    lognormal_varpi,
    network_output,
    random_model,
    scenario_model,
    simplified_statistic,
    verify_proposition3,
)

SCENARIO = ScenarioConfig(K=3, M=8, N=20)


@pytest.fixture
def model(stream) -> SimplifiedModel:
    """Random eight-kernel model on 8x8 inputs with phi = 0.2."""
    return random_model(8, stream, phi=0.2)


@pytest.mark.unit
class TestSimplifiedModel:
    """Test cases for the model parameters and derived constants."""

    def test_identity_response_of_ones(self):
        """Test the band structure of an all-ones kernel on the identity."""
        eta = identity_response(np.ones((1, 3, 3)), 5)
        np.testing.assert_array_equal(eta[0], [[3, 2, 1], [2, 3, 2], [1, 2, 3]])

    def test_identity_response_matches_correlation(self, stream):
        """Test eta against a direct valid cross-correlation with I_M."""
        kernel = stream.normal((4, 3, 3))
        eta = identity_response(kernel, 7)
        for lam in range(4):
            np.testing.assert_allclose(
                eta[lam], correlate2d(np.eye(7), kernel[lam], mode="valid"), atol=1e-14
            )

    def test_phi_and_zeta(self, model):
        """Test phi = theta . zeta and a stable zeta recomputation."""
        np.testing.assert_array_equal(model.recompute_zeta(), model.zeta)
        assert model.phi == pytest.approx(float(model.theta @ model.zeta))
        assert model.phi == pytest.approx(0.2)
        assert (model.n_kernels, model.kernel_size) == (8, 3)

    def test_validation(self):
        """Test rejected kernel, weight and varpi combinations."""
        with pytest.raises(ConfigError):
            SimplifiedModel(np.ones((2, 3)), np.ones(2), 8)
        with pytest.raises(ConfigError):
            SimplifiedModel(np.ones((2, 3, 3)), np.ones(3), 8)
        with pytest.raises(ConfigError):
            SimplifiedModel(np.ones((2, 9, 9)), np.ones(2), 8)
        with pytest.raises(ConfigError):
            SimplifiedModel(np.ones((2, 3, 3)), np.ones(2), 8, varpi=0.0)

    def test_scenario_scaling(self, stream):
        """Test that phi is the inverse of the expected H1 energy sum."""
        cfg = ScenarioConfig(K=4, M=8, snr_sense_db=0.0)
        assert scenario_model(cfg, stream).phi == pytest.approx(1.0 / (4 * 2.0))


@pytest.mark.unit
class TestSimplifiedStatistic:
    """Test cases for the closed-form statistic and the network it summarizes."""

    def test_zero_energy(self, model):
        """Test that zero energy gives one half at varpi one."""
        assert simplified_statistic(model, [0.0, 0.0, 0.0]) == 0.5

    def test_monotone(self, model):
        """Test that the statistic increases with total energy for positive phi."""
        values = simplified_statistic(model, np.linspace(0.0, 20.0, 50)[:, None])
        assert np.all(np.diff(values) > 0.0)

    def test_negative_energy(self, model):
        """Test that negative energies are rejected."""
        with pytest.raises(ValueError):
            simplified_statistic(model, [1.0, -0.1])

    def test_features_on_scaled_identity(self, model):
        """Test S_2 = zeta sigma^2 for diagonal inputs."""
        energies = np.array([0.5, 1.2, 2.0])
        features = encoder_features(model, energies[:, None, None] * np.eye(8))
        np.testing.assert_allclose(features, energies[:, None] * model.zeta[None, :], atol=1e-12)

    def test_network_matches_closed_form(self, model):
        """Test the forward pass against 1 / (1 + varpi exp(-phi sum))."""
        energies = np.array([0.5, 1.2, 2.0])
        covariances = energies[:, None, None] * np.eye(8)
        for varpi in (1.0, 3.0):
            scaled = model.with_varpi(varpi)
            assert network_output(scaled, covariances) == pytest.approx(
                simplified_statistic(scaled, energies), abs=1e-10
            )

    def test_literal_mode_with_nonnegative_kernel(self, stream):
        """Test that plain ELU agrees with the homogeneous form when eta >= 0."""
        positive = SimplifiedModel(np.abs(stream.normal((4, 3, 3))), stream.normal(4), 8)
        covariances = np.array([0.3, 4.0])[:, None, None] * np.eye(8)
        np.testing.assert_allclose(
            encoder_features(positive, covariances, "literal"),
            encoder_features(positive, covariances, "homogeneous"),
            rtol=1e-12,
        )

    def test_unknown_mode(self, model):
        """Test that an unknown forward mode is a configuration error."""
        with pytest.raises(ConfigError):
            encoder_features(model, np.eye(8)[None], "exact")

    def test_varpi_preserves_order(self, model, stream):
        """Test that changing varpi is a monotone transform of the statistic."""
        energies = stream.uniform(0.0, 5.0, (100, 3))
        assert ranks_identical(
            simplified_statistic(model, energies),
            simplified_statistic(model.with_varpi(7.0), energies),
        )


@pytest.mark.unit
class TestVarpi:
    """Test cases for the reporting-noise constant."""

    def test_noiseless(self):
        """Test that no noise gives varpi one."""
        assert lognormal_varpi([1.0, 2.0], 0.0) == 1.0
        assert estimate_varpi([1.0, 2.0], 0.0, 10, RngStream(0)) == 1.0

    def test_monte_carlo_matches_lognormal(self, stream):
        """Test the sampled mean of exp(-theta . n) against exp(v |theta|^2 / 2)."""
        theta = np.array([0.5, -0.3, 0.2])
        exact = lognormal_varpi(theta, 0.5)
        assert exact == pytest.approx(math.exp(0.095))
        assert estimate_varpi(theta, 0.5, 200_000, stream) == pytest.approx(exact, rel=0.01)


@pytest.mark.unit
class TestEquivalenceCheck:
    """Test cases for the rank and ROC comparison with ED and EC."""

    def test_passes_for_positive_phi(self, stream):
        """Test exact rank and ROC agreement on simulated slots."""
        model = scenario_model(SCENARIO, stream.child(999))
        report = verify_proposition3(model, 400, stream, SCENARIO)
        assert report.passed
        assert not report.inverted
        assert report.ranks_identical_simplified_ed and report.ranks_identical_ed_ec
        assert report.roc_identical_simplified_ed and report.roc_identical_ed_ec
        assert report.spearman_simplified_ed == pytest.approx(1.0)
        assert report.spearman_ed_ec == pytest.approx(1.0)
        assert len(report.roc_ed) == len(report.pfa_grid) == 5

    def test_inverted_for_negative_phi(self, stream):
        """Test that negative phi reverses the ranking and fails the check."""
        model = random_model(8, stream.child(999), phi=-0.01)
        report = verify_proposition3(model, 200, stream, SCENARIO)
        assert report.inverted
        assert not report.passed
        assert report.spearman_simplified_ed == pytest.approx(-1.0)
        assert report.roc_identical_simplified_ed

    def test_reporting_noise(self, stream):
        """Test that reporting noise only changes varpi."""
        model = scenario_model(SCENARIO, stream.child(999))
        report = verify_proposition3(model, 100, stream, SCENARIO, noise_variance=0.1)
        assert report.varpi_lognormal == pytest.approx(lognormal_varpi(model.theta, 0.1))
        assert report.varpi > 0.0
        assert report.ranks_identical_simplified_ed

    def test_report_json(self, stream):
        """Test that the report survives a JSON round trip."""
        model = scenario_model(SCENARIO, stream.child(999))
        report = verify_proposition3(model, 50, stream, SCENARIO)
        assert EquivalenceReport.model_validate_json(report.model_dump_json()) == report

    def test_invalid_arguments(self, model, stream):
        """Test the trial count and antenna count checks."""
        with pytest.raises(ValueError):
            verify_proposition3(model, 1, stream, SCENARIO)
        with pytest.raises(ConfigError):
            verify_proposition3(model, 10, stream, ScenarioConfig(M=6))
