"""
Command-line front end.

    python src/main.py simulate --scenario sinusoid3d --offset-ms 20 --seed 7 --out data/
    python src/main.py run --dataset data/ --init-td-ms 0 --calibrate-td on --out runs/a
    python src/main.py eval --est runs/a/est_trajectory.csv --gt data/groundtruth.csv
    python src/main.py sweep --offsets 20,40,60 --seeds 0,1,2 --jobs 4 --out sweep/
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from config import AppConfig, EstimatorConfig, SimulatorConfig, load_config
from dataset_io import (
    Dataset,
    load_dataset,
    read_trajectory_csv,
    read_waypoints_csv,
    write_csv,
    write_trajectory_csv,
)
from decorators import cli_command
from enums import DatasetFiles, EnvironmentKeys, ExitCode, Parameterization, RunFiles, TrajectoryKind
from errors import ConfigError, DatasetError, SolverError, TimeOffsetDiverged
from evaluation import TrajectoryRecord, rmse_ate
from imu_preintegration import ImuNoise
from sensor_simulator import FeatureCloud, NoiseSpec, SimScenario, TrajectorySpec, export_dataset
from sliding_window_estimator import SlidingWindowEstimator, run_stream
from utils import Error, Success, format_offset_ms, save_json, setup_logging, to_jsonable

ALIGNMENT = "SE3"
DEFAULT_OFFSETS_MS = (20.0, 40.0, 60.0)
DEFAULT_SEEDS = (0, 1, 2)
TD_TRACE_HEADER = ["t_s", "td_ms", "cost"]
SWEEP_HEADER = ["scenario", "offset_ms", "seed", "calibrate", "estimated_td_ms", "ate_cm", "status"]
SUMMARY_HEADER = ["offset_ms", "calibrate", "runs", "mean_estimated_td_ms", "mean_abs_td_error_ms", "mean_ate_cm"]
PARAMETERIZATION_FLAGS = {"xyz": Parameterization.XYZ, "invdepth": Parameterization.INV_DEPTH}


@dataclass
class RunReport:
    final_td_ms: float
    td_trace: list[tuple[float, float]]
    ate_rmse_cm: float | None
    costs: list[float]
    frames: int
    true_td_ms: float | None
    config: dict[str, Any]
    wall_time_s: float
    alignment: str = ALIGNMENT

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(self)


def build_scenario(
    sim: SimulatorConfig,
    imu: ImuNoise,
    *,
    kind: TrajectoryKind | None = None,
    offset_s: float = 0.0,
    pixel_sigma: float | None = None,
    seed: int = 0,
    duration: float | None = None,
    waypoints: tuple = (),
    noise_free: bool = False,
) -> SimScenario:
    """Simulator scenario from the layered config plus command-line overrides."""
    trajectory = TrajectorySpec(
        kind=kind or sim.trajectory,
        duration=sim.duration if duration is None else duration,
        waypoints=waypoints,
        seed=seed,
    )
    if noise_free:
        noise = NoiseSpec.noise_free(seed)
    else:
        noise = NoiseSpec(
            accel_noise_density=imu.accel_noise_density,
            gyro_noise_density=imu.gyro_noise_density,
            accel_random_walk=imu.accel_random_walk,
            gyro_random_walk=imu.gyro_random_walk,
            pixel_sigma=sim.pixel_sigma if pixel_sigma is None else pixel_sigma,
            seed=seed,
        )
    return SimScenario(
        trajectory=trajectory,
        features=FeatureCloud(count=sim.num_features, seed=seed),
        imu_rate=sim.imu_rate,
        cam_rate=sim.cam_rate,
        true_td=offset_s,
        noise=noise,
        min_visible=sim.min_visible,
        max_visible=sim.max_visible,
    )


def estimator_config_for(dataset: Dataset, config: EstimatorConfig) -> EstimatorConfig:
    """Takes camera model and gravity from the dataset's scenario.json when there is one."""
    if dataset.scenario is None:
        return config
    try:
        scenario = SimScenario.from_dict(dataset.scenario)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(dataset.root / DatasetFiles.SCENARIO, f"invalid scenario: {e}") from e
    return replace(config, intrinsics=scenario.intrinsics, extrinsics=scenario.extrinsics, world=scenario.world)


def execute_run(
    dataset: Dataset,
    config: EstimatorConfig,
    out_dir: str | Path,
    seed: int = 0,
) -> RunReport:
    """Runs the estimator over `dataset` and writes report.json, td_trace.csv and est_trajectory.csv."""
    started = time.perf_counter()
    estimator = SlidingWindowEstimator(config)
    configured = config.initial_state(dataset.frames[0].t_image + config.init_td)
    if dataset.groundtruth is None and configured is not None:
        logging.info(f"No ground truth in {dataset.root}; seeding the first state from the estimator config")
    initial = dataset.initial_state(config.init_td, config.init_velocity_noise, seed, configured)
    outputs = run_stream(estimator, dataset.imu, dataset.frames, initial)
    records = [TrajectoryRecord(o.state.t_stamp, o.state.p, o.state.q) for o in outputs]
    ate = rmse_ate(records, dataset.groundtruth.records()) if dataset.groundtruth is not None else None
    true_td = dataset.scenario.get("true_td") if dataset.scenario else None
    report = RunReport(
        final_td_ms=outputs[-1].td * 1e3,
        td_trace=[(o.t_image, o.td * 1e3) for o in outputs],
        ate_rmse_cm=ate,
        costs=[o.cost for o in outputs],
        frames=len(outputs),
        true_td_ms=None if true_td is None else true_td * 1e3,
        config=to_jsonable(config),
        wall_time_s=time.perf_counter() - started,
    )

    out_dir = Path(out_dir)
    write_csv(out_dir / RunFiles.TD_TRACE, TD_TRACE_HEADER, ([o.t_image, o.td * 1e3, o.cost] for o in outputs))
    write_trajectory_csv(out_dir / RunFiles.EST_TRAJECTORY, records)
    save_json(out_dir / RunFiles.REPORT, report.to_dict())
    return report


@cli_command
def cmd_simulate(args: argparse.Namespace) -> Success:
    app = load_config(args.config)
    scenario = build_scenario(
        app.simulator,
        app.estimator.imu,
        kind=args.scenario,
        offset_s=args.offset_ms * 1e-3,
        pixel_sigma=args.pixel_noise,
        seed=args.seed,
        duration=args.duration,
        waypoints=read_waypoints_csv(args.waypoints) if args.waypoints else (),
        noise_free=args.noise_free,
    )
    out = export_dataset(scenario, args.out)
    return Success(
        f"Simulated {scenario.trajectory.kind} with true td {format_offset_ms(scenario.true_td)} into {out}",
        payload=out,
    )


@cli_command
def cmd_run(args: argparse.Namespace) -> Success:
    config = load_config(args.config).estimator
    overrides: dict[str, Any] = {}
    if args.init_td_ms is not None:
        overrides["init_td"] = args.init_td_ms * 1e-3
    if args.calibrate_td is not None:
        overrides["calibrate_td"] = args.calibrate_td
    if args.window_size is not None:
        overrides["window_size"] = args.window_size
    if args.init_velocity_noise is not None:
        overrides["init_velocity_noise"] = args.init_velocity_noise
    if args.parameterization is not None:
        overrides["parameterization"] = PARAMETERIZATION_FLAGS[args.parameterization]
    config = replace(config, **overrides)

    dataset = load_dataset(args.dataset)
    config = estimator_config_for(dataset, config)
    logging.info(
        f"Running {len(dataset.frames)} frames from {dataset.root} "
        f"(init td {format_offset_ms(config.init_td)}, calibrate {'on' if config.calibrate_td else 'off'})"
    )
    report = execute_run(dataset, config, args.out, args.seed)
    ate = "n/a" if report.ate_rmse_cm is None else f"{report.ate_rmse_cm:.2f} cm"
    return Success(
        f"Run finished: {report.frames} frames, final td {report.final_td_ms:.2f} ms, ATE {ate}",
        payload=report,
    )


@cli_command
def cmd_eval(args: argparse.Namespace) -> Success:
    est = read_trajectory_csv(args.est)
    gt = read_trajectory_csv(args.gt)
    ate = rmse_ate(est, gt)
    print(f"ATE RMSE: {ate:.3f} cm ({ALIGNMENT} alignment, {len(est)} poses)")
    out_dir = Path(args.out) if args.out else Path(args.est).parent
    save_json(
        out_dir / RunFiles.EVAL,
        {"ate_rmse_cm": ate, "alignment": ALIGNMENT, "poses": len(est), "est": str(args.est), "gt": str(args.gt)},
    )
    return Success(f"ATE {ate:.3f} cm", payload=ate)


@dataclass(frozen=True, eq=False)
class SweepCell:
    kind: TrajectoryKind
    offset_ms: float
    seed: int
    out_dir: Path
    app: AppConfig = field(default_factory=AppConfig)
    init_td_ms: float = 0.0
    pixel_sigma: float | None = None
    duration: float | None = None

    @property
    def name(self) -> str:
        return f"{self.kind}_{self.offset_ms:g}ms_seed{self.seed}"


def _failure_status(e: BaseException) -> str:
    if isinstance(e, (TimeOffsetDiverged, SolverError)):
        return "diverged"
    return f"error: {type(e).__name__}"


def run_sweep_cell(cell: SweepCell) -> list[dict[str, Any]]:
    """
    Simulates one (offset, seed) dataset and runs it with calibration on and off.

    Failures never propagate; they end up in the returned rows' `status`.
    """
    base = {"scenario": str(cell.kind), "offset_ms": cell.offset_ms, "seed": cell.seed}
    blank = {"estimated_td_ms": None, "ate_cm": None}
    cell_dir = cell.out_dir / cell.name
    try:
        scenario = build_scenario(
            cell.app.simulator,
            cell.app.estimator.imu,
            kind=cell.kind,
            offset_s=cell.offset_ms * 1e-3,
            pixel_sigma=cell.pixel_sigma,
            seed=cell.seed,
            duration=cell.duration,
        )
        dataset = load_dataset(export_dataset(scenario, cell_dir / "data"))
    except Exception as e:
        logging.error(f"Sweep cell {cell.name} failed to simulate: {Error(str(e))}")
        return [{**base, "calibrate": c, **blank, "status": _failure_status(e)} for c in ("on", "off")]

    rows = []
    for calibrate in (True, False):
        label = "on" if calibrate else "off"
        try:
            config = replace(cell.app.estimator, calibrate_td=calibrate, init_td=cell.init_td_ms * 1e-3)
            report = execute_run(dataset, estimator_config_for(dataset, config), cell_dir / f"calibrate_{label}")
        except Exception as e:
            logging.error(f"Sweep cell {cell.name} (calibrate {label}) failed: {Error(str(e))}")
            rows.append({**base, "calibrate": label, **blank, "status": _failure_status(e)})
            continue
        logging.info(
            f"Sweep cell {cell.name} calibrate {label}: td {report.final_td_ms:.2f} ms, ATE {report.ate_rmse_cm:.2f} cm"
        )
        rows.append(
            {
                **base,
                "calibrate": label,
                "estimated_td_ms": report.final_td_ms,
                "ate_cm": report.ate_rmse_cm,
                "status": "ok",
            }
        )
    return rows


def summarize(rows: Sequence[dict[str, Any]]) -> list[list[Any]]:
    """Mean estimated td, mean |td error| and mean ATE per (offset, calibrate) over successful rows."""
    groups: dict[tuple[float, str], list[dict[str, Any]]] = defaultdict(list)
    for row in rows:
        groups[(row["offset_ms"], row["calibrate"])].append(row)
    table = []
    for (offset, calibrate), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] != "on")):
        ok = [r for r in members if r["status"] == "ok"]
        if ok:
            td = np.array([r["estimated_td_ms"] for r in ok])
            ate = np.array([r["ate_cm"] for r in ok])
            table.append([offset, calibrate, len(ok), td.mean(), np.abs(td - offset).mean(), ate.mean()])
        else:
            table.append([offset, calibrate, 0, None, None, None])
    return table


def _csv_value(value: Any) -> Any:
    if value is None:
        return ""
    return float(value) if isinstance(value, np.floating) else value


@cli_command
def cmd_sweep(args: argparse.Namespace) -> Success:
    app = load_config(args.config)
    out_dir = Path(args.out)
    cells = [
        SweepCell(
            kind=args.scenario or app.simulator.trajectory,
            offset_ms=offset,
            seed=seed,
            out_dir=out_dir,
            app=app,
            init_td_ms=args.init_td_ms,
            pixel_sigma=args.pixel_noise,
            duration=args.duration,
        )
        for offset in args.offsets
        for seed in args.seeds
    ]
    for cell in cells:
        if not abs(cell.offset_ms) < 500.0:
            raise ValueError(f"offset {cell.offset_ms} ms outside the +/-500 ms sanity bound")
    jobs = args.jobs if args.jobs is not None else int(os.getenv(EnvironmentKeys.SWEEP_JOBS, "1"))
    if jobs < 1:
        raise ValueError(f"--jobs must be >= 1, got {jobs}")
    logging.info(f"Sweeping {len(cells)} cell(s) with {jobs} job(s) into {out_dir}")

    if jobs == 1:
        results = [run_sweep_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(run_sweep_cell, cells))
    rows = [row for cell_rows in results for row in cell_rows]

    write_csv(out_dir / RunFiles.SWEEP, SWEEP_HEADER, ([_csv_value(r[k]) for k in SWEEP_HEADER] for r in rows))
    write_csv(out_dir / RunFiles.SUMMARY, SUMMARY_HEADER, ([_csv_value(v) for v in line] for line in summarize(rows)))
    failed = sum(r["status"] != "ok" for r in rows)
    return Success(f"Sweep finished: {len(rows)} row(s), {failed} failed", payload=rows)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="tdcal", description="Sliding-window VIO with online camera-IMU time-offset calibration"
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    shared = _ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="JSON file overriding the built-in defaults")
    shared.add_argument("--seed", type=int, default=0, help="Random seed")

    scenario = _ArgumentParser(add_help=False)
    scenario.add_argument("--scenario", type=TrajectoryKind, choices=list(TrajectoryKind), default=None)
    scenario.add_argument("--pixel-noise", type=float, default=None, help="Pixel noise sigma in px")
    scenario.add_argument("--duration", type=float, default=None, help="Trajectory duration in s")

    simulate = commands.add_parser("simulate", parents=[shared, scenario], help="Generate a synthetic dataset")
    simulate.add_argument("--out", required=True, help="Dataset directory")
    simulate.add_argument("--offset-ms", type=float, default=0.0, help="True camera-IMU time offset in ms")
    simulate.add_argument("--waypoints", default=None, help="t_s,x,y,z CSV for the waypoint_spline trajectory")
    simulate.add_argument("--noise-free", action="store_true", help="Disable all IMU and pixel noise")
    simulate.set_defaults(handler=cmd_simulate)

    run = commands.add_parser("run", parents=[shared], help="Run the estimator on a dataset")
    run.add_argument("--dataset", required=True, help="Dataset directory")
    run.add_argument("--out", required=True, help="Output directory for report.json and traces")
    run.add_argument("--init-td-ms", type=float, default=None, help="Initial time offset in ms")
    run.add_argument("--calibrate-td", type=_on_off, default=None, help="on|off")
    run.add_argument("--window-size", type=int, default=None)
    run.add_argument("--parameterization", choices=list(PARAMETERIZATION_FLAGS), default=None)
    run.add_argument("--init-velocity-noise", type=float, default=None, help="Seed velocity noise in m/s")
    run.set_defaults(handler=cmd_run)

    evaluate = commands.add_parser("eval", parents=[shared], help="ATE of an estimated trajectory")
    evaluate.add_argument("--est", required=True, help="est_trajectory.csv")
    evaluate.add_argument("--gt", required=True, help="groundtruth.csv or a trajectory CSV")
    evaluate.add_argument("--out", default=None, help="Directory for eval.json (default: next to --est)")
    evaluate.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep", parents=[shared, scenario], help="Offset x seed x calibrate matrix")
    sweep.add_argument("--out", required=True, help="Sweep output directory")
    sweep.add_argument("--offsets", type=_float_list, default=list(DEFAULT_OFFSETS_MS), help="Offsets in ms")
    sweep.add_argument("--seeds", type=_int_list, default=list(DEFAULT_SEEDS))
    sweep.add_argument("--init-td-ms", type=float, default=0.0)
    sweep.add_argument("--jobs", type=int, default=None, help="Parallel cells (default: TDCAL_JOBS or 1)")
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        logging.error(f"Usage error: {e}")
        return ExitCode.USAGE
    if args.verbose:
        setup_logging(logging.DEBUG)
    return int(args.handler(args))
