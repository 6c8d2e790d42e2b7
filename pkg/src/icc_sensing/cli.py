"""
Command-line entry point: ``icc-sensing theory|train|eval``.

Exit codes: 0 success, 2 bad usage or configuration, 3 runtime failure.
Every ``train``/``eval`` run writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

try:
    from pydantic import BaseModel, ConfigDict, ValidationError
except ImportError:
    raise ImportError("pydantic package is required")

from . import __version__
from .airmodel import ScenarioConfig, bpsk_theoretical_ber
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, IccSensingError
from .evaluate import (
    SWEEP_AXES,
    Method,
    OutputMetadata,
    export_constellation,
    run_ablation_no_aircomp,
    run_roc,
    run_sweep,
    write_table,
)
from .fusion import hdf_theoretical_pd
from .neuralsc import Architecture, ModelParams, TrainConfig, init_params, train
from .numerics import RngStream
from .simplified import scenario_model, verify_proposition3

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.iccs"
LOSS_NAME = "loss.csv"

ARCHITECTURES = {
    "full-size": Architecture.full_size,
    "desk-scale": Architecture.desk_scale,
    "miniature": Architecture.miniature,
}


class RunManifest(BaseModel):
    """What was run, with which inputs, and when."""

    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")

    command: list[str]
    config_path: str | None
    seed: int
    output_dir: str
    version: str
    started_at: datetime
    finished_at: datetime
    scenario: ScenarioConfig
    train_config: TrainConfig | None = None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _override(text: str) -> tuple[str, Any]:
    name, sep, raw = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected FIELD=VALUE, got {text!r}")
    try:
        return name.strip(), json.loads(raw)
    except json.JSONDecodeError:
        return name.strip(), raw


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--log-level", default="warning", choices=["debug", "info", "warning", "error"]
    )
    parser.add_argument("--progress", action="store_true", help="Show progress bars.")


def _scenario_flags(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="ScenarioConfig JSON file.")
    parser.add_argument(
        "--set",
        dest="overrides",
        type=_override,
        action="append",
        default=[],
        metavar="FIELD=VALUE",
        help="Override one ScenarioConfig field (JSON value), e.g. --set snr_report_db=-3.",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1, help="Monte Carlo worker threads.")
    parser.add_argument("--out", type=Path, required=out_required, help="Output directory.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icc-sensing",
        description="Cooperative spectrum sensing with over-the-air semantic aggregation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    theory = commands.add_parser("theory", help="Closed-form reference values.")
    which = theory.add_subparsers(dest="theory", required=True)
    bound = which.add_parser("hdf-bound", help="Majority-rule P_d over K BPSK reports.")
    bound.add_argument("--snr-report-db", type=float, required=True)
    bound.add_argument("--k", type=int, required=True)
    bound.add_argument("--p-local", type=float, default=1.0)
    ber = which.add_parser("ber", help="BPSK bit error rate over an ideal reporting link.")
    ber.add_argument("--snr-report-db", type=float, required=True)
    table = which.add_parser("pd-table", help="hdf-bound over a grid of reporting SNRs.")
    table.add_argument("--snr-report-db", type=_float_list, required=True, metavar="LIST")
    table.add_argument("--k", type=int, required=True)
    table.add_argument("--p-local", type=float, default=1.0)
    for sub in (bound, ber, table):
        _common(sub)

    trainer = commands.add_parser("train", help="Train the semantic transceiver.")
    _scenario_flags(trainer)
    trainer.add_argument("--train-config", type=Path, help="TrainConfig JSON file.")
    trainer.add_argument("--epochs", type=int)
    trainer.add_argument("--architecture", choices=sorted(ARCHITECTURES))
    _common(trainer)

    evaluation = commands.add_parser("eval", help="Monte Carlo experiments.")
    kinds = evaluation.add_subparsers(dest="experiment", required=True)
    roc = kinds.add_parser("roc", help="ROC curves of one or more methods.")
    sweep = kinds.add_parser("sweep", help="P_d along one scenario axis.")
    ablation = kinds.add_parser("ablation", help="ICC-CSS without over-the-air aggregation.")
    constellation = kinds.add_parser("constellation", help="Export transmitted symbols.")
    prop3 = kinds.add_parser("verify-prop3", help="Simplified model vs ED/EC rank equality.")
    for sub in (roc, sweep, ablation, constellation, prop3):
        _scenario_flags(sub)
        _common(sub)
    for sub in (roc, sweep):
        sub.add_argument(
            "--method", required=True, help="Comma-separated, e.g. ed-hdf,mmed-sdf,icc,simplified."
        )
    for sub in (roc, sweep, ablation, constellation):
        sub.add_argument("--checkpoint", type=Path)
    for sub in (roc, ablation, prop3):
        sub.add_argument("--pfa-grid", type=_float_list, default=[0.01, 0.05, 0.1, 0.2, 0.5])
    for sub in (roc, sweep, ablation, prop3):
        sub.add_argument("--trials", type=int, default=10_000)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument(
        "--values", required=True, help="Comma-separated; k_factor_iota takes KDB:IOTA pairs."
    )
    sweep.add_argument("--target-pfa", type=float, default=0.1)
    constellation.add_argument("--slots", type=int, default=1000)
    prop3.add_argument("--kernels", type=int, default=8)
    prop3.add_argument("--noise-variance", type=float, default=0.0)
    return parser


def load_scenario(path: Path | None, overrides: Sequence[tuple[str, Any]] = ()) -> ScenarioConfig:
    """Scenario from an optional JSON file with ``--set`` overrides applied."""
    cfg = ScenarioConfig()
    if path is not None:
        try:
            cfg = ScenarioConfig.model_validate_json(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read scenario config {path}: {exc.strerror or exc}") from exc
    if overrides:
        cfg = cfg.with_updates(**dict(overrides))
    return cfg


def load_train_config(path: Path | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        return TrainConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read train config {path}: {exc.strerror or exc}") from exc


def _parse_values(axis: str, text: str) -> list[Any]:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values is empty")
    try:
        if len(SWEEP_AXES[axis]) > 1:
            return [tuple(float(x) for x in item.split(":")) for item in items]
        return [float(item) for item in items]
    except ValueError:
        raise ConfigError(f"cannot parse --values {text!r} for axis {axis}") from None


def _methods(text: str) -> list[Method]:
    methods = [Method.parse(t) for t in text.split(",") if t.strip()]
    if not methods:
        raise ConfigError("--method is empty")
    return methods


def _load_params(args: argparse.Namespace, required: bool) -> ModelParams | None:
    if args.checkpoint is None:
        if required:
            raise ConfigError("ICC-CSS methods require --checkpoint")
        return None
    return load_checkpoint(args.checkpoint)


def _write_manifest(
    args: argparse.Namespace,
    argv: Sequence[str],
    started: datetime,
    cfg: ScenarioConfig,
    train_config: TrainConfig | None = None,
) -> Path:
    manifest = RunManifest(
        command=list(argv),
        config_path=str(args.config) if args.config is not None else None,
        seed=args.seed,
        output_dir=str(args.out),
        version=__version__,
        started_at=started,
        finished_at=datetime.now(timezone.utc),
        scenario=cfg,
        train_config=train_config,
    )
    path = args.out / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def cmd_theory(args: argparse.Namespace) -> int:
    """Print closed-form reference values."""
    match args.theory:
        case "hdf-bound":
            print(f"{hdf_theoretical_pd(args.p_local, args.snr_report_db, args.k):.10g}")
        case "ber":
            print(f"{bpsk_theoretical_ber(args.snr_report_db):.10g}")
        case "pd-table":
            print("snr_report_db,pd")
            for snr in args.snr_report_db:
                print(f"{snr:.10g},{hdf_theoretical_pd(args.p_local, snr, args.k):.10g}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    """Train from initialization and write checkpoint, loss CSV and manifest."""
    started = datetime.now(timezone.utc)
    cfg = load_scenario(args.config, args.overrides)
    tcfg = load_train_config(args.train_config)
    updates: dict[str, Any] = {"seed": args.seed}
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    if args.architecture is not None:
        updates["architecture"] = ARCHITECTURES[args.architecture](cfg.M)
    elif tcfg.architecture is None:
        updates["architecture"] = Architecture.full_size(cfg.M)
    tcfg = TrainConfig.model_validate({**tcfg.model_dump(), **updates})
    tcfg.architecture.check_scenario(cfg)

    params = train(init_params(tcfg.architecture, tcfg.seed), tcfg, cfg, progress=args.progress)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, args.out / CHECKPOINT_NAME)
    losses = pd.DataFrame(
        {"epoch": np.arange(1, len(params.loss_log) + 1), "mean_loss": params.loss_log}
    )
    losses.to_csv(args.out / LOSS_NAME, index=False, float_format="%.17g", lineterminator="\n")
    _write_manifest(args, argv, started, cfg, tcfg)
    if params.loss_log:
        print(f"final mean loss {params.loss_log[-1]:.10g} after {len(params.loss_log)} epochs")
    print(f"parameters {params.parameter_count()}")
    return EXIT_OK


def _metadata(kind: str, cfg: ScenarioConfig, args: argparse.Namespace, **extra: Any) -> OutputMetadata:
    methods = extra.pop("methods", [])
    return OutputMetadata(
        kind=kind,
        config=cfg,
        seed=args.seed,
        trials=getattr(args, "trials", None),
        methods=methods,
        extra=extra,
    )


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    """Run one evaluation experiment and write its tables and manifest."""
    started = datetime.now(timezone.utc)
    cfg = load_scenario(args.config, args.overrides)
    stream = RngStream(args.seed)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    match args.experiment:
        case "roc":
            methods = _methods(args.method)
            params = _load_params(args, any(m.needs_checkpoint for m in methods))
            for method in methods:
                curve = run_roc(
                    method, cfg, args.pfa_grid, args.trials, stream, params,
                    threads=args.threads, progress=args.progress,
                )
                write_table(
                    curve.to_frame(),
                    out / f"roc_{curve.method}.csv",
                    _metadata(
                        "roc", cfg, args, methods=[curve.method],
                        subchannels=curve.subchannels, local_pfa=curve.local_pfa,
                    ),
                )
                for point in curve.points:
                    print(
                        f"{curve.method} target_pfa={point.target_pfa:.10g} "
                        f"pfa={point.empirical_pfa:.10g} pd={point.empirical_pd:.10g}"
                    )
        case "sweep":
            methods = _methods(args.method)
            params = _load_params(args, any(m.needs_checkpoint for m in methods))
            frame = run_sweep(
                methods, cfg, args.axis, _parse_values(args.axis, args.values), args.target_pfa,
                args.trials, stream, params, threads=args.threads, progress=args.progress,
            )
            write_table(
                frame,
                out / f"sweep_{args.axis}.csv",
                _metadata(
                    "sweep", cfg, args, methods=[m.tag for m in methods],
                    axis=args.axis, target_pfa=args.target_pfa,
                ),
            )
            print(frame.to_string(index=False, float_format=lambda v: f"{v:.10g}"))
        case "ablation":
            params = _load_params(args, required=True)
            curve = run_ablation_no_aircomp(
                params, cfg, args.pfa_grid, args.trials, stream,
                threads=args.threads, progress=args.progress,
            )
            write_table(
                curve.to_frame(),
                out / f"roc_{curve.method}.csv",
                _metadata("ablation", cfg, args, methods=[curve.method], subchannels=curve.subchannels),
            )
            print(f"subchannels {curve.subchannels}")
            for point in curve.points:
                print(f"target_pfa={point.target_pfa:.10g} pd={point.empirical_pd:.10g}")
        case "constellation":
            params = _load_params(args, required=True)
            frame = export_constellation(params, cfg, args.slots, stream)
            write_table(frame, out / "constellation.csv", _metadata("constellation", cfg, args, slots=args.slots))
            print(f"rows {len(frame)}")
        case "verify-prop3":
            model = scenario_model(cfg, stream.child(args.trials + 1), n_kernels=args.kernels)
            report = verify_proposition3(
                model, args.trials, stream, cfg, args.pfa_grid, args.noise_variance
            )
            (out / "verify_prop3.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
            print(f"spearman simplified/ed {report.spearman_simplified_ed:.10g}")
            print(f"spearman ed/ec {report.spearman_ed_ec:.10g}")
            print(f"passed {report.passed}")

    _write_manifest(args, argv, started, cfg)
    return EXIT_OK


def _report_validation(exc: ValidationError) -> None:
    print(f"invalid configuration ({exc.error_count()} errors):", file=sys.stderr)
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        print(f"  {location}: {error['msg']}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        match args.command:
            case "theory":
                return cmd_theory(args)
            case "train":
                return cmd_train(args, argv)
            case _:
                return cmd_eval(args, argv)
    except ValidationError as exc:
        _report_validation(exc)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IccSensingError, OSError) as exc:
        logger.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
