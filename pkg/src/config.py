import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from enums import (
    CompensationJacobian,
    ConfigSection,
    EnvironmentKeys,
    Parameterization,
    TrajectoryKind,
)
from errors import ConfigError
from imu_preintegration import ImuNoise
from manifold_state import CameraExtrinsics, ImuKeyState, WorldConstants
from utils import load_json
from visual_factors import Intrinsics, VisualModel


def _floats(name: str, values, n: int) -> tuple[float, ...]:
    out = tuple(float(x) for x in np.asarray(values, dtype=float).ravel())
    if len(out) != n or not np.all(np.isfinite(out)):
        raise ValueError(f"{name} needs {n} finite numbers, got {values!r}")
    return out


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20
    lambda_init: float = 1e-4
    lambda_max: float = 1e12
    grad_tol: float = 1e-8
    cost_tol: float = 1e-10

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.lambda_init < self.lambda_max:
            raise ValueError("lambda_init must lie in (0, lambda_max)")


@dataclass(frozen=True, eq=False)
class EstimatorConfig:
    window_size: int = 10
    parameterization: Parameterization = Parameterization.INV_DEPTH
    calibrate_td: bool = True
    init_td: float = 0.0
    pixel_noise_px: float = 1.0
    huber_threshold: float = 1.0
    min_inverse_depth: float = 1e-4
    compensation_jacobian: CompensationJacobian = CompensationJacobian.EXACT
    outlier_threshold: float = 3.0
    default_depth: float = 5.0
    min_parallax_deg: float = 0.5
    relinearization_threshold: float = 0.1
    imu_lookahead: float = 0.1
    prior_sigma_attitude: float = 1e-3
    prior_sigma_position: float = 1e-3
    prior_sigma_velocity: float = 0.1
    prior_sigma_accel_bias: float = 0.1
    prior_sigma_gyro_bias: float = 0.01
    prior_sigma_td: float = 0.1
    init_position: tuple[float, float, float] | None = None
    init_attitude: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    init_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    init_velocity_noise: float = 0.0
    imu: ImuNoise = field(default_factory=ImuNoise)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    world: WorldConstants = field(default_factory=WorldConstants)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.window_size < 3:
            raise ValueError(f"window_size must be >= 3, got {self.window_size}")
        if not abs(self.init_td) < 0.5:
            raise ValueError(f"init_td {self.init_td}s outside the +/-0.5s sanity bound")
        if not self.pixel_noise_px > 0:
            raise ValueError("pixel_noise_px must be positive")
        object.__setattr__(self, "parameterization", Parameterization(self.parameterization))
        object.__setattr__(self, "compensation_jacobian", CompensationJacobian(self.compensation_jacobian))
        if self.init_velocity_noise < 0:
            raise ValueError("init_velocity_noise must be >= 0")
        if self.init_position is not None:
            object.__setattr__(self, "init_position", _floats("init_position", self.init_position, 3))
        object.__setattr__(self, "init_velocity", _floats("init_velocity", self.init_velocity, 3))
        q = _floats("init_attitude", self.init_attitude, 4)
        if not np.linalg.norm(q) > 0:
            raise ValueError("init_attitude must be a non-zero quaternion (w, x, y, z)")
        object.__setattr__(self, "init_attitude", q)

    def initial_state(self, t_stamp: float) -> ImuKeyState | None:
        """First key state from `init_position`/`init_attitude`/`init_velocity`, or None without a position."""
        if self.init_position is None:
            return None
        return ImuKeyState(
            q=self.init_attitude,
            p=self.init_position,
            v=self.init_velocity,
            t_stamp=t_stamp,
            t_dj=self.init_td,
        )

    def visual_model(self) -> VisualModel:
        return VisualModel(
            intrinsics=self.intrinsics,
            extrinsics=self.extrinsics,
            sigma_px=self.pixel_noise_px,
            min_inverse_depth=self.min_inverse_depth,
            compensation=self.compensation_jacobian,
        )

    def prior_sigmas(self) -> np.ndarray:
        """Per-component sigmas of the bootstrap prior on the first key state."""
        return np.repeat(
            [
                self.prior_sigma_attitude,
                self.prior_sigma_position,
                self.prior_sigma_velocity,
                self.prior_sigma_accel_bias,
                self.prior_sigma_gyro_bias,
            ],
            3,
        )


@dataclass(frozen=True)
class SimulatorConfig:
    trajectory: TrajectoryKind = TrajectoryKind.SINUSOID3D
    duration: float = 60.0
    imu_rate: float = 1000.0
    cam_rate: float = 30.0
    num_features: int = 600
    min_visible: int = 50
    max_visible: int = 120
    pixel_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "trajectory", TrajectoryKind(self.trajectory))
        if self.imu_rate < 10 * self.cam_rate:
            raise ValueError("imu_rate must be at least 10x cam_rate")


@dataclass(frozen=True, eq=False)
class AppConfig:
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)


_CAMERA_INTRINSIC_KEYS = {f.name for f in fields(Intrinsics)}
_CAMERA_EXTRINSIC_KEYS = {"R_ic", "p_ic"}
_NESTED_ESTIMATOR_KEYS = {"imu", "intrinsics", "extrinsics", "world", "solver"}


def _checked(section: str, values: dict, allowed: set[str]) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {', '.join(unknown)}")
    return values


def _build(section: str, cls, values: dict[str, Any], base=None):
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value in section '{section}': {e}") from e


def config_from_dict(data: dict[str, Any], base: AppConfig | None = None) -> AppConfig:
    """
    Overlays a parsed config document onto `base` (defaults when omitted).

    Raises:
        ConfigError: On unknown sections or keys, or values that fail validation.
    """
    base = base or AppConfig()
    _checked("<root>", data, {s.value for s in ConfigSection})
    est = base.estimator

    imu = _build(
        ConfigSection.IMU,
        ImuNoise,
        _checked(ConfigSection.IMU, data.get(ConfigSection.IMU, {}), {f.name for f in fields(ImuNoise)}),
        est.imu,
    )
    solver = _build(
        ConfigSection.SOLVER,
        SolverConfig,
        _checked(ConfigSection.SOLVER, data.get(ConfigSection.SOLVER, {}), {f.name for f in fields(SolverConfig)}),
        est.solver,
    )

    camera = _checked(
        ConfigSection.CAMERA,
        data.get(ConfigSection.CAMERA, {}),
        _CAMERA_INTRINSIC_KEYS | _CAMERA_EXTRINSIC_KEYS,
    )
    intrinsics = _build(
        ConfigSection.CAMERA,
        Intrinsics,
        {k: v for k, v in camera.items() if k in _CAMERA_INTRINSIC_KEYS},
        est.intrinsics,
    )
    extrinsics = est.extrinsics
    if _CAMERA_EXTRINSIC_KEYS & set(camera):
        extrinsics = _build(
            ConfigSection.CAMERA,
            CameraExtrinsics,
            {
                "R_ic": camera.get("R_ic", est.extrinsics.R_ic),
                "p_ic": camera.get("p_ic", est.extrinsics.p_ic),
            },
        )

    allowed = {f.name for f in fields(EstimatorConfig)} - _NESTED_ESTIMATOR_KEYS
    overrides = dict(_checked(ConfigSection.ESTIMATOR, data.get(ConfigSection.ESTIMATOR, {}), allowed))
    overrides.update(imu=imu, solver=solver, intrinsics=intrinsics, extrinsics=extrinsics)
    estimator = _build(ConfigSection.ESTIMATOR, EstimatorConfig, overrides, est)

    sim_values = _checked(
        ConfigSection.SIMULATOR,
        data.get(ConfigSection.SIMULATOR, {}),
        {f.name for f in fields(SimulatorConfig)},
    )
    simulator = _build(ConfigSection.SIMULATOR, SimulatorConfig, sim_values, base.simulator)
    return AppConfig(estimator=estimator, simulator=simulator)


def load_config(path: str | Path | None = None) -> AppConfig:
    """
    Loads the layered configuration: defaults, then the JSON file given by `path`
    or the TDCAL_CONFIG environment variable.
    """
    path = path or os.getenv(EnvironmentKeys.CONFIG_PATH)
    if not path:
        return AppConfig()
    try:
        data = load_json(path)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except ValueError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from e
    logging.info(f"Loaded configuration overrides from {path}")
    return config_from_dict(data)
