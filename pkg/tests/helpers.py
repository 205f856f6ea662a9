"""Shared builders for the test modules."""

import numpy as np

from manifold_state import ERROR_DIM, ImuKeyState, boxplus, quat_from_small_angle
from sensor_simulator import FeatureCloud, NoiseSpec, SimScenario, TrajectorySpec, truth_arrays


def random_state(rng: np.random.Generator, t_stamp: float = 0.0, t_dj: float = 0.0) -> ImuKeyState:
    return ImuKeyState(
        q=quat_from_small_angle(rng.uniform(-1.0, 1.0, 3)),
        p=rng.normal(0.0, 2.0, 3),
        v=rng.normal(0.0, 1.0, 3),
        b_a=rng.normal(0.0, 0.02, 3),
        b_g=rng.normal(0.0, 0.005, 3),
        t_stamp=t_stamp,
        t_dj=t_dj,
        gyro_raw=rng.normal(0.0, 0.5, 3),
    )


def perturbed(state: ImuKeyState, k: int, h: float) -> ImuKeyState:
    delta = np.zeros(ERROR_DIM)
    delta[k] = h
    return boxplus(state, delta)


def numeric_state_jacobian(fn, state: ImuKeyState, h: float = 1e-6) -> np.ndarray:
    """Central differences of fn(state) along each boxplus direction."""
    cols = [(fn(perturbed(state, k, h)) - fn(perturbed(state, k, -h))) / (2.0 * h) for k in range(ERROR_DIM)]
    return np.column_stack(cols)


def numeric_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        cols.append((fn(x + e) - fn(x - e)) / (2.0 * h))
    return np.column_stack(cols)


def assert_jacobian_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-5):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float).reshape(analytic.shape)
    tol = rel * np.maximum(1.0, np.abs(analytic))
    bad = np.abs(analytic - numeric) > tol
    assert not bad.any(), f"max mismatch {np.max(np.abs(analytic - numeric)[bad]):.3g} at {np.argwhere(bad)[:5]}"


def small_scenario(
    duration: float = 3.0,
    true_td: float = 0.0,
    noise: NoiseSpec | None = None,
    seed: int = 0,
    kind: str = "sinusoid3d",
) -> SimScenario:
    """A short scenario with a sparse feature cloud so estimator tests stay fast."""
    return SimScenario(
        trajectory=TrajectorySpec(kind=kind, duration=duration, seed=seed),
        features=FeatureCloud(count=250, seed=seed),
        true_td=true_td,
        noise=noise or NoiseSpec.noise_free(seed),
        min_visible=15,
        max_visible=40,
    )


def truth_key_state(scn: SimScenario, t: float, t_dj: float = 0.0) -> ImuKeyState:
    s = truth_arrays(scn.trajectory, [t])
    return ImuKeyState(q=s.q[0], p=s.p[0], v=s.v[0], t_stamp=t, t_dj=t_dj, gyro_raw=s.omega_body[0])
