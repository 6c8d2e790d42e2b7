"""
Cooperative spectrum sensing with distributed semantic encoders.

This package provides:
1. Scenario, sensing and reporting channel simulation (airmodel)
2. Classical detectors with hard and soft fusion (detectors, fusion)
3. The ICC-CSS transceiver, its training and checkpoints (neuralsc, checkpoint)
4. The simplified model and its energy-detector equivalence check (simplified)
5. Monte Carlo ROC, sweeps and exports (evaluate), driven by the ``icc-sensing`` CLI
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    ConvergenceError,
    DegenerateCovarianceError,
    DegenerateEstimateError,
    IccSensingError,
    NotHermitianError,
    NotPositiveSemidefiniteError,
    NumericsError,
    TrainingDivergedError,
)

from .numerics import RngStream, cholesky, hermitian_eig, hermitian_eigvalsh, sample_cscg

from .airmodel import (
    ChannelDraws,
    CovarianceSample,
    ReportedSymbols,
    ScenarioConfig,
    bpsk_channel,
    bpsk_theoretical_ber,
    draw_reporting_channel,
    estimate_channel,
    generate_slot,
    report_aircomp,
    report_orthogonal,
)

from .detectors import Detector, DetectorKind, local_decision, statistic, statistics

from .fusion import (
    QuantizerSpec,
    hdf_fuse,
    hdf_theoretical_pd,
    quantize_transmit,
    sdf_fuse,
)

from .neuralsc import (
    Architecture,
    ModelParams,
    TrainConfig,
    decode,
    encode,
    finite_difference_check,
    forward_train,
    init_params,
    loss,
    train,
)

from .checkpoint import load_checkpoint, save_checkpoint

from .simplified import (
    EquivalenceReport,
    SimplifiedModel,
    network_output,
    random_model,
    simplified_statistic,
    verify_proposition3,
)

from .evaluate import (
    Method,
    RocCurve,
    calibrate_threshold,
    export_constellation,
    run_ablation_no_aircomp,
    run_roc,
    run_sweep,
)

__all__ = [
    "__version__",
    "IccSensingError",
    "ConfigError",
    "NumericsError",
    "NotHermitianError",
    "NotPositiveSemidefiniteError",
    "ConvergenceError",
    "DegenerateCovarianceError",
    "DegenerateEstimateError",
    "CheckpointError",
    "TrainingDivergedError",
    "RngStream",
    "cholesky",
    "sample_cscg",
    "hermitian_eig",
    "hermitian_eigvalsh",
    "ScenarioConfig",
    "CovarianceSample",
    "ChannelDraws",
    "ReportedSymbols",
    "generate_slot",
    "estimate_channel",
    "draw_reporting_channel",
    "report_orthogonal",
    "report_aircomp",
    "bpsk_channel",
    "bpsk_theoretical_ber",
    "Detector",
    "DetectorKind",
    "statistic",
    "statistics",
    "local_decision",
    "QuantizerSpec",
    "hdf_fuse",
    "sdf_fuse",
    "quantize_transmit",
    "hdf_theoretical_pd",
    "Architecture",
    "ModelParams",
    "TrainConfig",
    "init_params",
    "encode",
    "decode",
    "loss",
    "forward_train",
    "finite_difference_check",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "SimplifiedModel",
    "EquivalenceReport",
    "random_model",
    "simplified_statistic",
    "network_output",
    "verify_proposition3",
    "Method",
    "RocCurve",
    "calibrate_threshold",
    "run_roc",
    "run_sweep",
    "export_constellation",
    "run_ablation_no_aircomp",
]
