import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from errors import InsufficientOverlap
from evaluation import TrajectoryRecord, associate, rmse_ate, umeyama_alignment
from manifold_state import rot_exp

IDENTITY = [1.0, 0.0, 0.0, 0.0]


def _records(t, p):
    return [TrajectoryRecord(ti, pi, IDENTITY) for ti, pi in zip(t, p)]


def _path(n=200):
    t = np.linspace(0.0, 20.0, n)
    return t, np.column_stack([3.0 * np.sin(0.5 * t), 2.0 * np.cos(0.3 * t), 0.5 * np.sin(t)])


def test_identical_trajectories_have_zero_error():
    t, p = _path()
    assert rmse_ate(_records(t, p), _records(t, p)) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=50)
@given(
    st.tuples(*[st.floats(-np.pi, np.pi)] * 3),
    st.tuples(*[st.floats(-50.0, 50.0)] * 3),
)
def test_error_is_invariant_to_rigid_motion(rotation, translation):
    t, p = _path()
    moved = p @ rot_exp(np.array(rotation)).T + np.array(translation)
    assert rmse_ate(_records(t, moved), _records(t, p)) == pytest.approx(0.0, abs=1e-7)


def test_isotropic_noise_gives_root_three_sigma():
    rng = np.random.default_rng(0)
    t, p = _path(10_000)
    noisy = p + rng.normal(0.0, 0.01, p.shape)
    assert rmse_ate(_records(t, noisy), _records(t, p)) == pytest.approx(np.sqrt(3.0), rel=0.05)


def test_alignment_recovers_transform(rng):
    _, p = _path()
    R = rot_exp(rng.uniform(-1.0, 1.0, 3))
    shift = rng.normal(0.0, 5.0, 3)
    R_est, t_est = umeyama_alignment(p, p @ R.T + shift)
    assert_allclose(R_est, R, atol=1e-10)
    assert_allclose(t_est, shift, atol=1e-9)


def test_estimates_are_matched_to_interpolated_truth():
    t, p = _path()
    est_t = t[1:-1] + 0.01
    est, truth = associate(_records(est_t, np.zeros((len(est_t), 3))), _records(t, p))
    assert len(est) == len(est_t)
    expected = np.column_stack([np.interp(est_t, t, p[:, k]) for k in range(3)])
    assert_allclose(truth, expected)


def test_too_little_overlap():
    t, p = _path()
    with pytest.raises(InsufficientOverlap):
        rmse_ate(_records(t[:9], p[:9]), _records(t, p))
    with pytest.raises(InsufficientOverlap):
        rmse_ate(_records(t + 100.0, p), _records(t, p))
