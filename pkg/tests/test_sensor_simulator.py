from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dataset_io import load_dataset
from enums import DatasetFiles
from errors import InsufficientVisibility, TrajectoryOutOfRange
from helpers import small_scenario
from imu_preintegration import predict_state, preintegrate
from manifold_state import ImuKeyState, quat_conj, quat_mul, rotvec_from_quat
from sensor_simulator import (
    NoiseSpec,
    SimScenario,
    TrajectorySpec,
    bias_random_walk,
    export_dataset,
    synth_frame,
    synth_frames,
    synth_imu_stream,
    truth_arrays,
    truth_state,
)


@pytest.mark.parametrize("kind", ["sinusoid3d", "circle", "waypoint_spline"])
def test_velocity_is_derivative_of_position(kind):
    traj = TrajectorySpec(kind=kind, duration=20.0)
    h = 1e-6
    for t in np.linspace(1.0, 19.0, 7):
        p = truth_arrays(traj, [t - h, t + h]).p
        assert_allclose((p[1] - p[0]) / (2 * h), truth_state(traj, t)[2], atol=1e-6)


def test_angular_rate_matches_attitude_derivative():
    traj = TrajectorySpec(duration=20.0)
    h = 1e-6
    for t in np.linspace(1.0, 19.0, 7):
        q = truth_arrays(traj, [t - h, t + h]).q
        rate = rotvec_from_quat(quat_mul(quat_conj(q[0]), q[1])) / (2 * h)
        assert_allclose(rate, truth_state(traj, t)[4], atol=1e-6)


def test_circle_speed():
    traj = TrajectorySpec(kind="circle", duration=30.0, radius=5.0, angular_rate=0.3)
    v = truth_arrays(traj, np.linspace(0.0, 30.0, 50)).v
    assert_allclose(np.linalg.norm(v, axis=1), 5.0 * 0.3, atol=1e-12)


def test_sinusoid_starts_level():
    traj = TrajectorySpec(duration=5.0)
    q, p, _, _, _ = truth_state(traj, 0.0)
    assert_allclose(q, [1.0, 0.0, 0.0, 0.0], atol=1e-12)
    assert_allclose(p, np.array(traj.center) + np.array(traj.amplitude) * np.sin(traj.phase), atol=1e-12)


def test_queries_outside_duration_raise():
    with pytest.raises(TrajectoryOutOfRange):
        truth_arrays(TrajectorySpec(duration=5.0), [5.1])


def test_waypoints_must_cover_duration():
    traj = TrajectorySpec(kind="waypoint_spline", duration=10.0, waypoints=((0.0, 0, 0, 0), (5.0, 1, 1, 1)))
    with pytest.raises(ValueError):
        truth_arrays(traj, [1.0])


def _hover(noise: NoiseSpec, duration: float = 2.0) -> SimScenario:
    still = TrajectorySpec(duration=duration, amplitude=(0.0, 0.0, 0.0), attitude_amplitude=(0.0, 0.0, 0.0))
    return SimScenario(trajectory=still, noise=noise)


def test_noise_free_hover_measures_gravity_only():
    imu = synth_imu_stream(_hover(NoiseSpec.noise_free()))
    assert_allclose(imu.accel, np.tile([0.0, 0.0, 9.81], (len(imu.t_ns), 1)), atol=1e-12)
    assert_allclose(imu.gyro, 0.0, atol=1e-15)


def test_white_noise_variance():
    noise = NoiseSpec(accel_random_walk=0.0, gyro_random_walk=0.0, seed=3)
    imu = synth_imu_stream(_hover(noise, duration=200.0))
    accel_var = np.var(imu.accel - [0.0, 0.0, 9.81], axis=0)
    gyro_var = np.var(imu.gyro, axis=0)
    assert_allclose(accel_var, 1000.0 * noise.accel_noise_density**2, rtol=0.05)
    assert_allclose(gyro_var, 1000.0 * noise.gyro_noise_density**2, rtol=0.05)


def test_bias_random_walk_variance_grows_linearly():
    rng = np.random.default_rng(5)
    sigma, dt = 0.1, 0.01
    walks = np.stack([bias_random_walk(rng, 1000, sigma, dt) for _ in range(2000)])
    for k in (250, 999):
        assert np.var(walks[:, k, :]) == pytest.approx(sigma**2 * k * dt, rel=0.1)


def test_noise_free_imu_integrates_to_truth():
    scn = SimScenario(trajectory=TrajectorySpec(duration=10.0), noise=NoiseSpec.noise_free())
    imu = synth_imu_stream(scn)
    q, p, v, _, w = truth_state(scn.trajectory, 0.0)
    start = ImuKeyState(q=q, p=p, v=v, gyro_raw=w)
    pre = preintegrate(imu.samples(), np.zeros(3), np.zeros(3))
    end = predict_state(start, pre, scn.world, 10.0, 0.0, imu.gyro[-1])
    _, p_true, _, _, _ = truth_state(scn.trajectory, 10.0)
    assert_allclose(end.p, p_true, atol=1e-4)


def test_zero_offset_frame_is_exact_projection():
    scn = small_scenario(duration=3.0)
    frame = synth_frame(scn, 1.0)
    s = truth_arrays(scn.trajectory, [1.0])
    ext, K = scn.extrinsics, scn.intrinsics
    for fid, u, v in frame.tracks:
        P_cam = ext.R_ic.T @ (s.R[0].T @ (scn.feature_points[fid] - s.p[0]) - ext.p_ic)
        assert_allclose([u, v], [K.fx * P_cam[0] / P_cam[2] + K.cx, K.fy * P_cam[1] / P_cam[2] + K.cy], atol=1e-9)


def test_time_offset_shifts_image_content():
    scn = small_scenario(duration=3.0, true_td=0.02)
    shifted = synth_frame(scn, 1.0)
    reference = synth_frame(replace(scn, true_td=0.0), 1.02)
    assert shifted.t_image == pytest.approx(1.0)
    assert [x[0] for x in shifted.tracks] == [x[0] for x in reference.tracks]
    assert_allclose([x[1:] for x in shifted.tracks], [x[1:] for x in reference.tracks], atol=1e-9)


def test_pixel_noise_statistics():
    sigma = 1.5
    noisy = small_scenario(duration=30.0, noise=NoiseSpec(pixel_sigma=sigma, seed=4))
    clean = replace(noisy, noise=NoiseSpec.noise_free())
    errors = []
    for t_ns in noisy.frame_times_ns()[:800]:
        a = synth_frame(noisy, t_ns * 1e-9, t_ns)
        b = synth_frame(clean, t_ns * 1e-9, t_ns)
        assert [x[0] for x in a.tracks] == [x[0] for x in b.tracks]
        errors.append(np.array([x[1:] for x in a.tracks]) - np.array([x[1:] for x in b.tracks]))
    errors = np.concatenate(errors)
    assert len(errors) > 10_000
    assert np.std(errors) == pytest.approx(sigma, rel=0.05)
    assert abs(np.mean(errors)) < 0.05


def test_visibility_floor():
    scn = replace(small_scenario(duration=2.0), min_visible=1000)
    with pytest.raises(InsufficientVisibility):
        synth_frames(scn)


def test_rate_and_offset_validation():
    with pytest.raises(ValueError):
        SimScenario(imu_rate=200.0, cam_rate=30.0)
    with pytest.raises(ValueError):
        SimScenario(true_td=0.6)


def test_frames_stay_inside_trajectory():
    scn = small_scenario(duration=3.0, true_td=-0.05)
    t = scn.frame_times_ns() * 1e-9 + scn.true_td
    assert t.min() >= 0.0
    assert t.max() <= 3.0


def test_scenario_round_trip():
    scn = small_scenario(duration=4.0, true_td=0.03, kind="circle")
    again = SimScenario.from_dict(scn.to_dict())
    assert again.to_dict() == scn.to_dict()
    with pytest.raises(ValueError):
        SimScenario.from_dict({**scn.to_dict(), "schema_version": 99})


def test_export_is_deterministic(tmp_path):
    scn = small_scenario(duration=2.0, noise=NoiseSpec(seed=7))
    a = export_dataset(scn, tmp_path / "a")
    b = export_dataset(scn, tmp_path / "b")
    for name in DatasetFiles:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = export_dataset(replace(scn, noise=NoiseSpec(seed=8)), tmp_path / "c")
    assert (a / DatasetFiles.GROUNDTRUTH).read_bytes() == (c / DatasetFiles.GROUNDTRUTH).read_bytes()
    assert (a / DatasetFiles.IMU).read_bytes() != (c / DatasetFiles.IMU).read_bytes()


def test_export_round_trips_through_loader(tmp_path):
    scn = small_scenario(duration=2.0, true_td=0.01, noise=NoiseSpec(seed=2))
    data = load_dataset(export_dataset(scn, tmp_path))
    imu = synth_imu_stream(scn)
    frames = synth_frames(scn)
    assert np.array_equal(data.imu_t_ns, imu.t_ns)
    assert np.array_equal(np.array([s.accel for s in data.imu]), imu.accel)
    assert np.array_equal(np.array([s.gyro for s in data.imu]), imu.gyro)
    assert [f.t_image for f in data.frames] == [f.t_image for f in frames]
    assert [f.tracks for f in data.frames] == [f.tracks for f in frames]
    assert SimScenario.from_dict(data.scenario).to_dict() == scn.to_dict()
