"""Pytest configuration and fixtures for the icc_sensing tests."""

import math

import numpy as np
import pytest

from icc_sensing.airmodel import ScenarioConfig
from icc_sensing.checkpoint import save_checkpoint
from icc_sensing.neuralsc import Architecture, ModelParams, TrainConfig, init_params, train
from icc_sensing.numerics import RngStream


@pytest.fixture
def stream() -> RngStream:
    """Fresh random stream with a fixed seed."""
    return RngStream(20240607)


@pytest.fixture
def small_scenario() -> ScenarioConfig:
    """Small scenario matching the miniature architecture (M=8)."""
    return ScenarioConfig(K=3, M=8, N=20, snr_sense_db=-5.0, snr_report_db=0.0)


@pytest.fixture
def ideal_link() -> ScenarioConfig:
    """Noiseless reporting link with perfect CSI and pure line of sight."""
    return ScenarioConfig(
        K=6, M=4, N=20, iota=1.0, k_factor_db=math.inf, snr_report_db=math.inf
    )


@pytest.fixture
def random_psd():
    """Factory for random Hermitian positive semi-definite matrices."""

    def make(m: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
        cols = rank or m + 2
        a = rng.standard_normal((m, cols)) + 1j * rng.standard_normal((m, cols))
        return a @ a.conj().T / cols

    return make


@pytest.fixture(scope="session")
def miniature_arch() -> Architecture:
    """One inception block and two residual blocks on 8x8 inputs."""
    return Architecture.miniature()


@pytest.fixture
def miniature_params(miniature_arch) -> ModelParams:
    """Untrained miniature transceiver."""
    return init_params(miniature_arch, seed=3)


@pytest.fixture(scope="session")
def miniature_train_config(miniature_arch) -> TrainConfig:
    """A few quick epochs on a tiny dataset."""
    return TrainConfig(
        epochs=3, batch_size=16, dataset_size=48, seed=5, architecture=miniature_arch
    )


@pytest.fixture(scope="session")
def trained_miniature(miniature_arch, miniature_train_config) -> ModelParams:
    """Miniature transceiver after a short training run."""
    scenario = ScenarioConfig(K=3, M=8, N=20)
    return train(init_params(miniature_arch, seed=3), miniature_train_config, scenario)


@pytest.fixture(scope="session")
def miniature_checkpoint(trained_miniature, tmp_path_factory):
    """Path of the trained miniature checkpoint on disk."""
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.iccs"
    return save_checkpoint(trained_miniature, path)
