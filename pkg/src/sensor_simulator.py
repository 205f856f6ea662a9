"""
Synthetic ground truth, IMU and camera streams.

Trajectories are closed-form (or a C2 cubic spline) in position with an Euler-angle attitude
program, so acceleration and body rates are exact. A frame stamped t_image shows the scene
at the true instant t_image + true_td. Timestamps are integer nanoseconds.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

import dataset_io
from enums import DatasetFiles, TrajectoryKind
from errors import InsufficientVisibility, TrajectoryOutOfRange
from imu_preintegration import ImuSample
from manifold_state import CameraExtrinsics, WorldConstants, quat_from_rot
from sliding_window_estimator import FrameInput
from visual_factors import Intrinsics

SCHEMA_VERSION = 1
TIME_TOLERANCE = 1e-9
MIN_FEATURE_DEPTH = 0.1
FRAME_MARGIN = 0.2

# camera looking along the body x axis, image x to body -y, image y to body -z
FORWARD_CAMERA_R_IC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
FORWARD_CAMERA_P_IC = np.array([0.05, 0.0, 0.02])


@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    """
    Analytic ground-truth trajectory.

    sinusoid3d: p = center + amplitude * sin(frequency * t + phase)
    circle: p = center + radius * (cos(angular_rate * t), sin(angular_rate * t), 0)
    waypoint_spline: natural cubic spline through `waypoints` rows (t, x, y, z); random
    waypoints every 4 s are drawn from `seed` when none are given.

    Attitude for all kinds is R = Rz(yaw) Ry(pitch) Rx(roll) with each angle
    attitude_amplitude * sin(attitude_frequency * t), so the attitude at t = 0 is identity.
    """

    kind: TrajectoryKind = TrajectoryKind.SINUSOID3D
    duration: float = 60.0
    amplitude: tuple[float, float, float] = (2.0, 1.5, 0.5)
    frequency: tuple[float, float, float] = (0.5, 0.7, 0.9)
    phase: tuple[float, float, float] = (0.0, 0.5, 1.0)
    center: tuple[float, float, float] = (0.0, 0.0, 1.5)
    radius: float = 5.0
    angular_rate: float = 0.3
    attitude_amplitude: tuple[float, float, float] = (0.2, 0.2, 0.6)
    attitude_frequency: tuple[float, float, float] = (0.5, 0.6, 0.4)
    waypoints: tuple[tuple[float, float, float, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TrajectoryKind(self.kind))
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @cached_property
    def _spline(self) -> CubicSpline:
        if self.waypoints:
            wp = np.asarray(self.waypoints, dtype=float)
        else:
            rng = np.random.default_rng(self.seed)
            times = np.arange(0.0, self.duration + 4.0, 4.0)
            xyz = rng.uniform(-2.0, 2.0, (len(times), 3)) * np.array([1.0, 1.0, 0.25])
            wp = np.column_stack([times, xyz + np.asarray(self.center)])
        if wp[0, 0] > 0 or wp[-1, 0] < self.duration:
            raise ValueError("waypoints must span [0, duration]")
        return CubicSpline(wp[:, 0], wp[:, 1:], bc_type="natural")

    def position_terms(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)[:, None]
        c = np.asarray(self.center)
        if self.kind == TrajectoryKind.SINUSOID3D:
            A, w, ph = (np.asarray(x) for x in (self.amplitude, self.frequency, self.phase))
            s, co = np.sin(w * t + ph), np.cos(w * t + ph)
            return c + A * s, A * w * co, -A * w * w * s
        if self.kind == TrajectoryKind.CIRCLE:
            r, w = self.radius, self.angular_rate
            s, co, z = np.sin(w * t), np.cos(w * t), np.zeros_like(t)
            p = c + np.hstack([r * co, r * s, z])
            v = np.hstack([-r * w * s, r * w * co, z])
            a = np.hstack([-r * w * w * co, -r * w * w * s, z])
            return p, v, a
        t = t[:, 0]
        return self._spline(t), self._spline(t, 1), self._spline(t, 2)


@dataclass(frozen=True, eq=False)
class TruthState:
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a_world: np.ndarray
    omega_body: np.ndarray
    R: np.ndarray


def truth_arrays(traj: TrajectorySpec, t: np.ndarray) -> TruthState:
    """Vectorized ground truth at the times `t`; every field gains a leading axis."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.min() < -TIME_TOLERANCE or t.max() > traj.duration + TIME_TOLERANCE:
        raise TrajectoryOutOfRange(f"t outside [0, {traj.duration}]: {t.min():.6f}..{t.max():.6f}")
    p, v, a = traj.position_terms(t)

    A = np.asarray(traj.attitude_amplitude)
    w = np.asarray(traj.attitude_frequency)
    angles = A * np.sin(w * t[:, None])
    rates = A * w * np.cos(w * t[:, None])
    roll, pitch, yaw = angles.T
    droll, dpitch, dyaw = rates.T
    R = Rotation.from_euler("ZYX", np.column_stack([yaw, pitch, roll])).as_matrix()
    omega = np.column_stack(
        [
            droll - dyaw * np.sin(pitch),
            dpitch * np.cos(roll) + dyaw * np.sin(roll) * np.cos(pitch),
            -dpitch * np.sin(roll) + dyaw * np.cos(roll) * np.cos(pitch),
        ]
    )
    return TruthState(q=quat_from_rot(R), p=p, v=v, a_world=a, omega_body=omega, R=R)


def truth_state(traj: TrajectorySpec, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (q, p, v, a_world, omega_body) at time t."""
    s = truth_arrays(traj, [t])
    return s.q[0], s.p[0], s.v[0], s.a_world[0], s.omega_body[0]


@dataclass(frozen=True)
class NoiseSpec:
    accel_noise_density: float = 2.0e-3
    gyro_noise_density: float = 1.6968e-4
    accel_random_walk: float = 3.0e-3
    gyro_random_walk: float = 1.9393e-5
    pixel_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "seed" and not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    @classmethod
    def noise_free(cls, seed: int = 0) -> NoiseSpec:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class FeatureCloud:
    """A box of static points placed in front of (+x of) the trajectory's extent."""

    count: int = 400
    near: float = 4.0
    depth: float = 4.0
    lateral_margin: float = 8.0
    vertical_margin: float = 3.0
    seed: int = 0

    def points(self, traj: TrajectorySpec) -> np.ndarray:
        p, _, _ = traj.position_terms(np.linspace(0.0, traj.duration, 400))
        lo, hi = p.min(axis=0), p.max(axis=0)
        rng = np.random.default_rng(self.seed)
        low = np.array([hi[0] + self.near, lo[1] - self.lateral_margin, lo[2] - self.vertical_margin])
        high = np.array([hi[0] + self.near + self.depth, hi[1] + self.lateral_margin, hi[2] + self.vertical_margin])
        return rng.uniform(low, high, (self.count, 3))


@dataclass(frozen=True, eq=False)
class SimScenario:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    features: FeatureCloud = field(default_factory=FeatureCloud)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    extrinsics: CameraExtrinsics = field(
        default_factory=lambda: CameraExtrinsics(FORWARD_CAMERA_R_IC, FORWARD_CAMERA_P_IC)
    )
    imu_rate: float = 1000.0
    cam_rate: float = 30.0
    true_td: float = 0.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    min_visible: int = 50
    max_visible: int = 80
    world: WorldConstants = field(default_factory=WorldConstants)

    def __post_init__(self):
        if self.imu_rate < 10 * self.cam_rate:
            raise ValueError(f"imu_rate {self.imu_rate} must be at least 10x cam_rate {self.cam_rate}")
        if not abs(self.true_td) < 0.5:
            raise ValueError(f"true_td {self.true_td}s outside the +/-0.5s sanity bound")

    @cached_property
    def feature_points(self) -> np.ndarray:
        return self.features.points(self.trajectory)

    def frame_times_ns(self) -> np.ndarray:
        """Image stamps whose true instant (and the IMU around it) lies inside the trajectory."""
        start = max(0.0, -self.true_td) + FRAME_MARGIN
        stop = self.trajectory.duration - max(0.0, self.true_td) - FRAME_MARGIN
        k = np.arange(int(np.ceil(start * self.cam_rate)), int(np.floor(stop * self.cam_rate)) + 1)
        return np.round(k * 1e9 / self.cam_rate).astype(np.int64)

    def imu_times_ns(self) -> np.ndarray:
        n = int(np.floor(self.trajectory.duration * self.imu_rate + 1e-9)) + 1
        return np.round(np.arange(n) * 1e9 / self.imu_rate).astype(np.int64)

    def to_dict(self) -> dict[str, Any]:
        traj = asdict(self.trajectory)
        return {
            "schema_version": SCHEMA_VERSION,
            "trajectory": {**traj, "kind": str(self.trajectory.kind)},
            "features": asdict(self.features),
            "intrinsics": asdict(self.intrinsics),
            "extrinsics": {"R_ic": self.extrinsics.R_ic.tolist(), "p_ic": self.extrinsics.p_ic.tolist()},
            "imu_rate": self.imu_rate,
            "cam_rate": self.cam_rate,
            "true_td": self.true_td,
            "noise": asdict(self.noise),
            "min_visible": self.min_visible,
            "max_visible": self.max_visible,
            "gravity": self.world.gravity.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SimScenario:
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema_version {version!r}")
        traj = dict(data["trajectory"])
        for key in ("amplitude", "frequency", "phase", "center", "attitude_amplitude", "attitude_frequency"):
            traj[key] = tuple(traj[key])
        traj["waypoints"] = tuple(tuple(w) for w in traj.get("waypoints", ()))
        return cls(
            trajectory=TrajectorySpec(**traj),
            features=FeatureCloud(**data["features"]),
            intrinsics=Intrinsics(**data["intrinsics"]),
            extrinsics=CameraExtrinsics(**data["extrinsics"]),
            imu_rate=data["imu_rate"],
            cam_rate=data["cam_rate"],
            true_td=data["true_td"],
            noise=NoiseSpec(**data["noise"]),
            min_visible=data["min_visible"],
            max_visible=data["max_visible"],
            world=WorldConstants(gravity=data["gravity"]),
        )


def bias_random_walk(rng: np.random.Generator, n: int, sigma: float, dt: float) -> np.ndarray:
    """Discrete random walk b_0 = 0, b_k+1 = b_k + sigma * sqrt(dt) * N(0, I)."""
    steps = rng.standard_normal((n, 3)) * sigma * np.sqrt(dt)
    steps[0] = 0.0
    return np.cumsum(steps, axis=0)


@dataclass(frozen=True, eq=False)
class ImuStream:
    t_ns: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.t_ns * 1e-9

    def samples(self) -> list[ImuSample]:
        return [ImuSample(t, a, g) for t, a, g in zip(self.t, self.accel, self.gyro)]


def synth_imu_stream(scn: SimScenario) -> ImuStream:
    """Noisy IMU measurements at every IMU stamp, with the true bias trajectories."""
    t_ns = scn.imu_times_ns()
    truth = truth_arrays(scn.trajectory, t_ns * 1e-9)
    noise = scn.noise
    rate = scn.imu_rate
    rng = np.random.default_rng([noise.seed, 0])
    n = len(t_ns)
    white_a = rng.standard_normal((n, 3)) * noise.accel_noise_density * np.sqrt(rate)
    white_g = rng.standard_normal((n, 3)) * noise.gyro_noise_density * np.sqrt(rate)
    b_a = bias_random_walk(rng, n, noise.accel_random_walk, 1.0 / rate)
    b_g = bias_random_walk(rng, n, noise.gyro_random_walk, 1.0 / rate)
    specific_force = np.einsum("nji,nj->ni", truth.R, truth.a_world - scn.world.gravity)
    return ImuStream(
        t_ns=t_ns,
        accel=specific_force + b_a + white_a,
        gyro=truth.omega_body + b_g + white_g,
        b_a=b_a,
        b_g=b_g,
    )


def synth_imu(scn: SimScenario) -> list[ImuSample]:
    return synth_imu_stream(scn).samples()


def _project_truth(scn: SimScenario, t_true: float) -> tuple[np.ndarray, np.ndarray]:
    s = truth_arrays(scn.trajectory, [t_true])
    ext = scn.extrinsics
    R_wc = s.R[0] @ ext.R_ic
    p_wc = s.p[0] + s.R[0] @ ext.p_ic
    P_cam = (scn.feature_points - p_wc) @ R_wc
    Z = P_cam[:, 2]
    front = Z > MIN_FEATURE_DEPTH
    Zs = np.where(front, Z, 1.0)
    K = scn.intrinsics
    uv = np.column_stack([K.fx * P_cam[:, 0] / Zs + K.cx, K.fy * P_cam[:, 1] / Zs + K.cy])
    ids = np.flatnonzero(front & K.in_bounds(uv))[: scn.max_visible]
    return ids, uv[ids]


def synth_frame(scn: SimScenario, t_image: float, t_ns: int | None = None) -> FrameInput:
    """
    The frame stamped `t_image` (camera clock): true projections at t_image + true_td plus
    Gaussian pixel noise. Noise is drawn from a generator seeded by (noise seed, stamp), so
    any frame can be regenerated independently.
    """
    t_ns = int(round(t_image * 1e9)) if t_ns is None else int(t_ns)
    ids, uv = _project_truth(scn, t_image + scn.true_td)
    if scn.noise.pixel_sigma > 0:
        rng = np.random.default_rng([scn.noise.seed, 1, t_ns])
        uv = uv + rng.standard_normal(uv.shape) * scn.noise.pixel_sigma
    return FrameInput(t_image=t_ns * 1e-9, tracks=[(int(i), float(u), float(v)) for i, (u, v) in zip(ids, uv)])


def synth_frames(scn: SimScenario) -> list[FrameInput]:
    """
    Raises:
        InsufficientVisibility: When frames see fewer features than `min_visible` on average.
    """
    frames = [synth_frame(scn, t_ns * 1e-9, t_ns) for t_ns in scn.frame_times_ns()]
    mean_visible = float(np.mean([len(f.tracks) for f in frames])) if frames else 0.0
    if mean_visible < scn.min_visible:
        raise InsufficientVisibility(f"{mean_visible:.1f} visible features per frame, need {scn.min_visible}")
    return frames


def export_dataset(scn: SimScenario, out_dir: str | Path, gt_stride: int = 5) -> Path:
    """Writes imu.csv, frames.csv, groundtruth.csv and scenario.json into `out_dir`."""
    out_dir = Path(out_dir)
    imu = synth_imu_stream(scn)
    frames = synth_frames(scn)
    gt_ns = imu.t_ns[::gt_stride]
    truth = truth_arrays(scn.trajectory, gt_ns * 1e-9)
    dataset_io.write_imu_csv(out_dir / DatasetFiles.IMU, imu.t_ns, imu.gyro, imu.accel)
    dataset_io.write_frames_csv(out_dir / DatasetFiles.FRAMES, frames)
    dataset_io.write_groundtruth_csv(out_dir / DatasetFiles.GROUNDTRUTH, gt_ns, truth.p, truth.q, truth.v)
    dataset_io.write_scenario(out_dir / DatasetFiles.SCENARIO, scn)
    logging.info(
        f"Exported dataset to {out_dir}: {len(imu.t_ns)} IMU samples, {len(frames)} frames, "
        f"true td {scn.true_td * 1e3:.1f} ms"
    )
    return out_dir
