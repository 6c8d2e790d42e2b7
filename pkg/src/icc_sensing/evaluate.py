"""
Monte Carlo evaluation: threshold calibration, ROC curves for every pipeline,
parameter sweeps, the orthogonal-reporting ablation and constellation export.

Each trial owns its random streams (stream id = trial index, one lane per
phase), slots are generated in fixed-size chunks on a thread pool and reduced
in trial order, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum, StrEnum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

try:
    from pydantic import BaseModel, ConfigDict
except ImportError:
    raise ImportError("pydantic package is required")

from .airmodel import (
    BpskDraws,
    ScenarioConfig,
    apply_bpsk,
    draw_bpsk,
    generate_slot,
    report_aircomp,
    report_orthogonal,
)
from .detectors import Detector, DetectorKind, statistics
from .errors import ConfigError
from .fusion import ClampCounter, calibrate_quantizer, hdf_fuse, quantize_transmit, sdf_fuse
from .neuralsc import ModelParams, decode, encode
from .numerics import RngStream
from .simplified import SimplifiedModel, scenario_model, simplified_statistic

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1024
QUANTIZER_BITS = 8
ROC_COLUMNS = ["target_pfa", "threshold", "empirical_pfa", "empirical_pd", "trials_h0", "trials_h1"]
DEFAULT_LOCAL_PFA_GRID = np.linspace(0.0, 1.0, 201)

SENSING_LANE = 0
REPORTING_LANE = 1
CONSTELLATION_LANE = 7


class Phase(IntEnum):
    CALIBRATION_H0 = 0
    CALIBRATION_H1 = 1
    EVALUATION_H0 = 2
    EVALUATION_H1 = 3

    @property
    def label(self) -> int:
        return int(self in (Phase.CALIBRATION_H1, Phase.EVALUATION_H1))


class Family(StrEnum):
    HDF = "hdf"
    SDF = "sdf"
    ICC = "icc"
    ICC_NO_AIRCOMP = "icc-no-aircomp"
    SIMPLIFIED = "simplified"


@dataclass(frozen=True)
class Method:
    """A complete sensing pipeline: detector with HDF/SDF, ICC-CSS or the simplified model."""

    family: Family
    detector: DetectorKind | None = None

    @classmethod
    def parse(cls, text: str) -> Method:
        """Parse ``ed-hdf``, ``mmed-sdf``, ``icc``, ``icc-no-aircomp`` or ``simplified``."""
        text = text.strip().lower()
        try:
            return cls(Family(text))
        except ValueError:
            pass
        detector, _, fusion = text.partition("-")
        try:
            family = Family(fusion)
            kind = DetectorKind(detector)
        except ValueError:
            raise ConfigError(f"unknown method {text!r}") from None
        if family not in (Family.HDF, Family.SDF):
            raise ConfigError(f"unknown method {text!r}")
        return cls(family, kind)

    @property
    def tag(self) -> str:
        if self.detector is None:
            return self.family.value
        return f"{self.detector.value}-{self.family.value}"

    @property
    def needs_checkpoint(self) -> bool:
        return self.family in (Family.ICC, Family.ICC_NO_AIRCOMP)

    def subchannels(self, cfg: ScenarioConfig, n_symbols: int) -> int:
        """Orthogonal channel uses per decision."""
        match self.family:
            case Family.HDF:
                return cfg.K
            case Family.SDF:
                return QUANTIZER_BITS * cfg.K
            case Family.ICC_NO_AIRCOMP:
                return cfg.K * n_symbols
            case _:
                return n_symbols


class RocPoint(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    target_pfa: float
    threshold: float
    empirical_pfa: float
    empirical_pd: float
    trials_h0: int
    trials_h1: int

    @property
    def pd_stderr(self) -> float:
        return math.sqrt(self.empirical_pd * (1.0 - self.empirical_pd) / self.trials_h1)


class RocCurve(BaseModel):
    """ROC points of one method at one scenario, sorted by target false-alarm rate."""

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    method: str
    points: list[RocPoint]
    config: ScenarioConfig
    subchannels: int
    seed: int
    local_pfa: list[float] | None = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([p.model_dump() for p in self.points], columns=ROC_COLUMNS)

    def pd_violations(self, sigmas: float = 3.0) -> list[int]:
        """Indices where P_d drops below its predecessor (by P_fa) beyond ``sigmas`` std-errors."""
        ordered = sorted(range(len(self.points)), key=lambda i: self.points[i].empirical_pfa)
        flagged = []
        for prev, cur in zip(ordered, ordered[1:]):
            a, b = self.points[prev], self.points[cur]
            spread = sigmas * math.hypot(a.pd_stderr, b.pd_stderr)
            if b.empirical_pd < a.empirical_pd - spread:
                flagged.append(cur)
        return flagged


class OutputMetadata(BaseModel):
    """JSON sidecar written next to every CSV."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    kind: str
    config: ScenarioConfig
    seed: int
    trials: int | None = None
    methods: list[str] = []
    extra: dict[str, Any] = {}


def calibrate_threshold(statistics_h0, target_pfa: float, warn: bool = True) -> float:
    """Neyman-Pearson threshold from simulated H0 statistics.

    Returns the order statistic at 1-based index ceil((1 - target_pfa) n) so that
    at most a ``target_pfa`` share of the H0 statistics lies strictly above it;
    index 0 (target 1) gives -inf.

    Raises:
        ValueError: on an empty sample or a target outside [0, 1].
    """
    values = np.sort(np.asarray(statistics_h0, dtype=float).reshape(-1))
    n = values.size
    if n == 0:
        raise ValueError("cannot calibrate a threshold from an empty sample")
    if not 0.0 <= target_pfa <= 1.0:
        raise ValueError(f"target_pfa must lie in [0, 1], got {target_pfa}")
    if warn and target_pfa > 0.0 and n < 10.0 / target_pfa:
        logger.warning(
            "calibrating P_fa=%g from only %d H0 samples (recommended >= %d)",
            target_pfa,
            n,
            math.ceil(10.0 / target_pfa),
        )
    index = math.ceil((1.0 - target_pfa) * n - 1e-9)
    if index <= 0:
        return -math.inf
    return float(values[index - 1])


def trial_stream(stream: RngStream, phase: Phase, index: int, lane: int) -> RngStream:
    return RngStream(stream.master_seed, index, (*stream.lane, stream.stream_id, int(phase), lane))


def simulate_phase(
    cfg: ScenarioConfig,
    stream: RngStream,
    phase: Phase,
    trials: int,
    reduce: Callable[[np.ndarray], np.ndarray],
    threads: int = 1,
    progress: bool = False,
) -> np.ndarray:
    """Generate ``trials`` slots of one phase and reduce them chunk by chunk.

    ``reduce`` maps covariances (n, K, M, M) to per-trial outputs (n, ...); the
    chunk results are concatenated in trial order.
    """
    if trials < 1:
        raise ValueError(f"trials must be positive, got {trials}")

    def slot(index: int) -> np.ndarray:
        sensing = trial_stream(stream, phase, index, SENSING_LANE)
        return generate_slot(cfg, phase.label, sensing).covariances

    outputs = []
    starts = range(0, trials, CHUNK_SIZE)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in tqdm(starts, desc=phase.name.lower(), disable=not progress, leave=False):
            rs = np.stack(list(pool.map(slot, range(start, min(start + CHUNK_SIZE, trials)))))
            outputs.append(reduce(rs))
    return np.concatenate(outputs)


def threshold_points(
    calibration_h0: np.ndarray,
    evaluation_h0: np.ndarray,
    evaluation_h1: np.ndarray,
    pfa_grid: Sequence[float],
) -> list[RocPoint]:
    """Calibrate on one H0 set, then measure P_fa and P_d on held-out sets."""
    points = []
    for target in sorted(pfa_grid):
        gamma = calibrate_threshold(calibration_h0, target)
        points.append(
            RocPoint(
                target_pfa=float(target),
                threshold=gamma,
                empirical_pfa=float(np.mean(evaluation_h0 > gamma)),
                empirical_pd=float(np.mean(evaluation_h1 > gamma)),
                trials_h0=evaluation_h0.size,
                trials_h1=evaluation_h1.size,
            )
        )
    return points


def _bpsk_draws(cfg: ScenarioConfig, stream: RngStream, phase: Phase, trials: int) -> BpskDraws:
    draws = [
        draw_bpsk(cfg, trial_stream(stream, phase, i, REPORTING_LANE), (cfg.K,))
        for i in range(trials)
    ]
    return BpskDraws(
        gains=np.stack([d.gains for d in draws]), noise=np.stack([d.noise for d in draws])
    )


def _hdf_points(
    local: dict[Phase, np.ndarray],
    cfg: ScenarioConfig,
    stream: RngStream,
    pfa_grid: Sequence[float],
    local_pfa_grid: Sequence[float],
) -> tuple[list[RocPoint], list[float]]:
    """Trace the HDF curve by sweeping the local false-alarm probability.

    All local thresholds reuse the same BPSK draws per trial. For each global
    target the largest local P_fa whose calibrated global P_fa meets the
    target is used.
    """
    phases = (Phase.CALIBRATION_H0, Phase.EVALUATION_H0, Phase.EVALUATION_H1)
    draws = {phase: _bpsk_draws(cfg, stream, phase, local[phase].shape[0]) for phase in phases}
    local_grid = np.sort(np.asarray(local_pfa_grid, dtype=float))
    thresholds = [
        calibrate_threshold(local[Phase.CALIBRATION_H0], p, warn=False) for p in local_grid
    ]

    def global_rate(phase: Phase, gamma: float) -> float:
        votes = local[phase] > gamma
        return float(np.mean(hdf_fuse(apply_bpsk(votes, draws[phase]))))

    calibrated = np.array([global_rate(Phase.CALIBRATION_H0, g) for g in thresholds])
    points, chosen = [], []
    for target in sorted(pfa_grid):
        feasible = np.flatnonzero(calibrated <= target)
        j = int(feasible[-1]) if feasible.size else 0
        if not feasible.size:
            logger.warning("HDF cannot reach global P_fa=%g; using local P_fa=%g", target, local_grid[0])
        gamma = thresholds[j]
        points.append(
            RocPoint(
                target_pfa=float(target),
                threshold=gamma,
                empirical_pfa=global_rate(Phase.EVALUATION_H0, gamma),
                empirical_pd=global_rate(Phase.EVALUATION_H1, gamma),
                trials_h0=local[Phase.EVALUATION_H0].shape[0],
                trials_h1=local[Phase.EVALUATION_H1].shape[0],
            )
        )
        chosen.append(float(local_grid[j]))
    return points, chosen


def _sdf_fused(
    local: dict[Phase, np.ndarray], cfg: ScenarioConfig, stream: RngStream
) -> dict[Phase, np.ndarray]:
    """Quantize, send over the bit channel and sum the local statistics of every phase."""
    calibration = np.concatenate([local[Phase.CALIBRATION_H0], local[Phase.CALIBRATION_H1]])
    quantizer = calibrate_quantizer(calibration, bits=QUANTIZER_BITS)
    counter = ClampCounter()
    fused = {}
    for phase in (Phase.CALIBRATION_H0, Phase.EVALUATION_H0, Phase.EVALUATION_H1):
        received = np.stack(
            [
                quantize_transmit(t, quantizer, cfg, trial_stream(stream, phase, i, REPORTING_LANE), counter)
                for i, t in enumerate(local[phase])
            ]
        )
        fused[phase] = sdf_fuse(received)
    logger.info("SDF quantizer [%g, %g], clamp rate %.4f", quantizer.lo, quantizer.hi, counter.rate)
    return fused


def _icc_fused(
    symbols: np.ndarray,
    params: ModelParams,
    cfg: ScenarioConfig,
    stream: RngStream,
    phase: Phase,
    aircomp: bool,
) -> np.ndarray:
    """Send each trial's symbols over its own channel draw and decode h_{H1}."""
    received = np.empty((symbols.shape[0], params.arch.n_symbols), dtype=np.complex128)
    for i, y in enumerate(symbols):
        reporting = trial_stream(stream, phase, i, REPORTING_LANE)
        if aircomp:
            received[i] = report_aircomp(y, cfg, reporting).aggregated
        else:
            received[i] = report_orthogonal(y, cfg, reporting).per_sensor.mean(axis=0)
    return np.concatenate(
        [np.atleast_1d(decode(params, received[s : s + CHUNK_SIZE])) for s in range(0, len(received), CHUNK_SIZE)]
    )


def run_roc(
    method: Method | str,
    cfg: ScenarioConfig,
    pfa_grid: Sequence[float],
    trials: int,
    stream: RngStream,
    params: ModelParams | None = None,
    simplified_model: SimplifiedModel | None = None,
    threads: int = 1,
    progress: bool = False,
    local_pfa_grid: Sequence[float] | None = None,
) -> RocCurve:
    """Monte Carlo ROC of a full sensing pipeline.

    Args:
        method: Pipeline, e.g. ``Method.parse("ed-hdf")``.
        cfg: Scenario to simulate.
        pfa_grid: Target global false-alarm probabilities.
        trials: Slots per phase (calibration H0, evaluation H0, evaluation H1).
        stream: Parent stream; trial i of each phase derives its own streams.
        params: Trained transceiver for ICC-CSS methods.
        simplified_model: Model for the ``simplified`` method (random if omitted).
        threads: Worker threads for slot generation.
        progress: Show tqdm progress bars.
        local_pfa_grid: Local false-alarm grid swept by HDF.

    Raises:
        ConfigError: unknown method, or an ICC-CSS method without ``params``.
    """
    method = Method.parse(method) if isinstance(method, str) else method
    n_symbols = params.arch.n_symbols if params is not None else 0
    simulate = lambda phase, reduce: simulate_phase(  # noqa: E731
        cfg, stream, phase, trials, reduce, threads, progress
    )
    eval_phases = (Phase.CALIBRATION_H0, Phase.EVALUATION_H0, Phase.EVALUATION_H1)
    local_pfa = None

    if method.family in (Family.HDF, Family.SDF):
        detector = Detector.for_scenario(method.detector, cfg)
        phases = eval_phases if method.family is Family.HDF else tuple(Phase)
        local = {phase: simulate(phase, lambda rs: statistics(detector, rs)) for phase in phases}
        if method.family is Family.HDF:
            grid = DEFAULT_LOCAL_PFA_GRID if local_pfa_grid is None else local_pfa_grid
            points, local_pfa = _hdf_points(local, cfg, stream, pfa_grid, grid)
        else:
            fused = _sdf_fused(local, cfg, stream)
            points = threshold_points(*(fused[p] for p in eval_phases), pfa_grid)
    elif method.needs_checkpoint:
        if params is None:
            raise ConfigError(f"method {method.tag} requires a trained checkpoint")
        params.arch.check_scenario(cfg)
        aircomp = method.family is Family.ICC
        fused = {
            phase: _icc_fused(
                simulate(phase, lambda rs: encode(params, rs)), params, cfg, stream, phase, aircomp
            )
            for phase in eval_phases
        }
        points = threshold_points(*(fused[p] for p in eval_phases), pfa_grid)
    else:
        model = simplified_model or scenario_model(cfg, stream.child(9))
        n_symbols = model.n_kernels
        energy = lambda rs: np.trace(rs, axis1=-2, axis2=-1).real / cfg.M  # noqa: E731
        fused = {
            phase: np.asarray(simplified_statistic(model, simulate(phase, energy)))
            for phase in eval_phases
        }
        if model.phi < 0.0:
            fused = {phase: -t for phase, t in fused.items()}
        points = threshold_points(*(fused[p] for p in eval_phases), pfa_grid)

    curve = RocCurve(
        method=method.tag,
        points=points,
        config=cfg,
        subchannels=method.subchannels(cfg, n_symbols),
        seed=stream.master_seed,
        local_pfa=local_pfa,
    )
    if violations := curve.pd_violations():
        logger.warning("%s: P_d decreases beyond 3 std-errors at points %s", method.tag, violations)
    return curve


def run_ablation_no_aircomp(
    params: ModelParams,
    cfg: ScenarioConfig,
    pfa_grid: Sequence[float],
    trials: int,
    stream: RngStream,
    threads: int = 1,
    progress: bool = False,
) -> RocCurve:
    """ICC-CSS with each sensor on its own subchannel and the FC averaging the K vectors."""
    return run_roc(
        Method(Family.ICC_NO_AIRCOMP), cfg, pfa_grid, trials, stream, params,
        threads=threads, progress=progress,
    )


SWEEP_AXES: dict[str, tuple[str, ...]] = {
    "snr_sense_db": ("snr_sense_db",),
    "snr_report_db": ("snr_report_db",),
    "n_samples": ("N",),
    "k_sensors": ("K",),
    "k_factor_iota": ("k_factor_db", "iota"),
}
_AXIS_COLUMNS = {"n_samples": ("n_samples",), "k_sensors": ("k_sensors",)}


def _axis_updates(axis: str, value) -> dict[str, Any]:
    fields = SWEEP_AXES[axis]
    values = tuple(value) if len(fields) > 1 else (value,)
    if len(values) != len(fields):
        raise ConfigError(f"axis {axis} expects {len(fields)} values per point, got {value!r}")
    return {
        name: int(v) if name in ("N", "K") else float(v) for name, v in zip(fields, values)
    }


def run_sweep(
    methods: Sequence[Method | str],
    cfg: ScenarioConfig,
    axis: str,
    values: Sequence[Any],
    target_pfa: float,
    trials: int,
    stream: RngStream,
    params: ModelParams | None = None,
    simplified_model: SimplifiedModel | None = None,
    threads: int = 1,
    progress: bool = False,
) -> pd.DataFrame:
    """P_d at ``target_pfa`` along one scenario axis, thresholds recalibrated per point.

    Returns:
        One row per (value, method): the axis column(s), ``method``, then the ROC columns.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    columns = _AXIS_COLUMNS.get(axis, SWEEP_AXES[axis])
    rows = []
    for value in tqdm(values, desc=axis, disable=not progress):
        updates = _axis_updates(axis, value)
        point_cfg = cfg.with_updates(**updates)
        for method in methods:
            curve = run_roc(
                method, point_cfg, [target_pfa], trials, stream, params, simplified_model,
                threads=threads,
            )
            row = dict(zip(columns, updates.values()))
            row["method"] = curve.method
            row.update(curve.points[0].model_dump())
            rows.append(row)
    return pd.DataFrame(rows, columns=[*columns, "method", *ROC_COLUMNS])


def export_constellation(
    params: ModelParams, cfg: ScenarioConfig, slots: int, stream: RngStream
) -> pd.DataFrame:
    """Transmitted symbols y_k of ``slots`` slots alternating H0 / H1.

    Returns:
        Rows ``slot,sensor,symbol_index,re,im,label`` (slots * K * D of them).
    """
    params.arch.check_scenario(cfg)
    labels = np.arange(slots) % 2
    lane = (*stream.lane, stream.stream_id, CONSTELLATION_LANE)
    chunks = []
    for start in range(0, slots, CHUNK_SIZE):
        rs = np.stack(
            [
                generate_slot(cfg, int(labels[i]), RngStream(stream.master_seed, i, lane)).covariances
                for i in range(start, min(start + CHUNK_SIZE, slots))
            ]
        )
        chunks.append(encode(params, rs))
    symbols = np.concatenate(chunks)
    slot, sensor, index = np.indices(symbols.shape).reshape(3, -1)
    return pd.DataFrame(
        {
            "slot": slot,
            "sensor": sensor,
            "symbol_index": index,
            "re": symbols.real.reshape(-1),
            "im": symbols.imag.reshape(-1),
            "label": labels[slot],
        }
    )


def metadata_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}.meta.json")


def write_table(frame: pd.DataFrame, path: str | Path, metadata: OutputMetadata) -> Path:
    """Write ``frame`` as CSV plus its JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    metadata_path(path).write_text(metadata.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path
