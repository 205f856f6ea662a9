import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ImuGapError, RelinearizationRequired
from helpers import assert_jacobian_close, numeric_state_jacobian, random_state
from imu_preintegration import (
    RES_BA,
    RES_BG,
    RES_P,
    RES_R,
    RES_V,
    ImuNoise,
    ImuSample,
    batch_between,
    bias_corrected,
    imu_residual,
    imu_residual_jacobians,
    integrate,
    predict_state,
    preintegrate,
    sqrt_information,
)
from manifold_state import (
    ERROR_DIM,
    POS,
    VEL,
    ImuKeyState,
    WorldConstants,
    boxplus,
    quat_conj,
    quat_from_small_angle,
    quat_mul,
    quat_normalize,
    quat_to_rot,
    rotvec_from_quat,
)

WORLD = WorldConstants()


def constant_samples(accel, gyro, duration=1.0, steps=1000):
    return [ImuSample(k * duration / steps, accel, gyro) for k in range(steps + 1)]


def test_constant_acceleration():
    pre = preintegrate(constant_samples([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]), np.zeros(3), np.zeros(3))
    assert pre.dt_total == pytest.approx(1.0, abs=1e-12)
    assert_allclose(pre.alpha, [0.5, 0.0, 0.0], atol=1e-9)
    assert_allclose(pre.beta, [1.0, 0.0, 0.0], atol=1e-9)
    assert_allclose(pre.gamma, [1.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_constant_rate_quarter_turn():
    pre = preintegrate(constant_samples([0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]), np.zeros(3), np.zeros(3))
    expected = [np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)]
    assert_allclose(pre.gamma, expected, atol=1e-6)
    assert_allclose(pre.alpha, np.zeros(3), atol=1e-15)


def test_stationary_hover_has_zero_residual():
    samples = constant_samples([0.0, 0.0, 9.81], [0.0, 0.0, 0.0], duration=0.5, steps=500)
    pre = preintegrate(samples, np.zeros(3), np.zeros(3))
    x0 = ImuKeyState(q=[1.0, 0.0, 0.0, 0.0], p=[1.0, 2.0, 3.0], v=np.zeros(3))
    x1 = ImuKeyState(q=[1.0, 0.0, 0.0, 0.0], p=[1.0, 2.0, 3.0], v=np.zeros(3), t_stamp=0.5)
    assert_allclose(imu_residual(pre, x0, x1, WORLD), np.zeros(ERROR_DIM), atol=1e-9)


@pytest.mark.parametrize("dt", [0.0, -1e-3, 0.2])
def test_bad_sample_spacing_raises(dt):
    pre = preintegrate([], np.zeros(3), np.zeros(3))
    s0 = ImuSample(1.0, np.zeros(3), np.zeros(3))
    s1 = ImuSample(1.0 + dt, np.zeros(3), np.zeros(3))
    with pytest.raises(ImuGapError):
        integrate(pre, s0, s1)


def _signals(rng, n):
    """Smooth per-run accel/gyro signals: c + A sin(2 pi f t + phase)."""
    params = {
        name: (
            rng.uniform(-scale, scale, (n, 3)),
            rng.uniform(0.0, amp, (n, 3)),
            rng.uniform(0.2, 0.5, (n, 3)),
            rng.uniform(0.0, 2 * np.pi, (n, 3)),
        )
        for name, scale, amp in (("accel", 2.0, 0.5), ("gyro", 0.5, 0.5))
    }

    def signal(name, t):
        c, A, f, ph = params[name]
        return c + A * np.sin(2 * np.pi * f * t + ph)

    return lambda t: signal("accel", t), lambda t: signal("gyro", t)


def _rk4_reference(accel, gyro, n, duration, h):
    q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    alpha = np.zeros((n, 3))
    beta = np.zeros((n, 3))

    def deriv(t, q, beta):
        omega = np.concatenate([np.zeros((n, 1)), gyro(t)], axis=1)
        dq = 0.5 * quat_mul(q, omega)
        dbeta = np.einsum("nij,nj->ni", quat_to_rot(quat_normalize(q)), accel(t))
        return dq, beta, dbeta

    t = 0.0
    for _ in range(int(round(duration / h))):
        k1 = deriv(t, q, beta)
        k2 = deriv(t + h / 2, q + h / 2 * k1[0], beta + h / 2 * k1[2])
        k3 = deriv(t + h / 2, q + h / 2 * k2[0], beta + h / 2 * k2[2])
        k4 = deriv(t + h, q + h * k3[0], beta + h * k3[2])
        q = quat_normalize(q + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        alpha = alpha + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        beta = beta + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        t += h
    return q, alpha, beta


def test_matches_oversampled_rk4(rng):
    n, duration, rate = 4, 0.3, 1000
    accel, gyro = _signals(rng, n)
    q_ref, alpha_ref, beta_ref = _rk4_reference(accel, gyro, n, duration, h=1e-4)
    times = np.arange(int(duration * rate) + 1) / rate
    a_s = np.stack([accel(t) for t in times])
    g_s = np.stack([gyro(t) for t in times])
    for i in range(n):
        samples = [ImuSample(t, a_s[k, i], g_s[k, i]) for k, t in enumerate(times)]
        pre = preintegrate(samples, np.zeros(3), np.zeros(3))
        assert_allclose(pre.alpha, alpha_ref[i], atol=1e-5)
        assert_allclose(pre.beta, beta_ref[i], atol=1e-5)
        angle = np.linalg.norm(rotvec_from_quat(quat_mul(quat_conj(q_ref[i]), pre.gamma)))
        assert angle < 1e-6


def _random_batch(rng, n=60, rate=500.0, t0=0.0):
    times = t0 + np.arange(n + 1) / rate
    base_a = rng.normal(0.0, 1.0, 3) + np.array([0.0, 0.0, 9.81])
    base_g = rng.normal(0.0, 0.5, 3)
    return [
        ImuSample(t, base_a + rng.normal(0.0, 0.3, 3), base_g + rng.normal(0.0, 0.1, 3))
        for t in times
    ]


def test_preintegration_is_deterministic(rng):
    samples = _random_batch(rng)
    a = preintegrate(samples, np.zeros(3), np.zeros(3))
    b = preintegrate(samples, np.zeros(3), np.zeros(3))
    assert np.array_equal(a.alpha, b.alpha)
    assert np.array_equal(a.gamma, b.gamma)
    assert np.array_equal(a.cov, b.cov)


def test_covariance_stays_psd_and_grows(rng):
    for _ in range(50):
        samples = _random_batch(rng, n=40)
        pre = preintegrate(samples[:1], np.zeros(3), np.zeros(3))
        trace = 0.0
        for s0, s1 in zip(samples[:-1], samples[1:]):
            pre = integrate(pre, s0, s1)
            assert_allclose(pre.cov, pre.cov.T, atol=1e-15)
            assert np.linalg.eigvalsh(pre.cov).min() >= -1e-12
            assert np.trace(pre.cov) >= trace
            trace = np.trace(pre.cov)


def test_whitening_inverts_covariance(rng):
    pre = preintegrate(_random_batch(rng), np.zeros(3), np.zeros(3))
    W = sqrt_information(pre.cov)
    assert_allclose(W @ (pre.cov + 1e-12 * np.eye(ERROR_DIM)) @ W.T, np.eye(ERROR_DIM), atol=1e-6)


def test_bias_correction_identity_at_linearization_point(rng):
    ba, bg = rng.normal(0.0, 0.02, 3), rng.normal(0.0, 0.005, 3)
    pre = preintegrate(_random_batch(rng), ba, bg)
    alpha, beta, gamma = bias_corrected(pre, ba, bg)
    assert np.array_equal(alpha, pre.alpha)
    assert np.array_equal(beta, pre.beta)
    assert_allclose(gamma, pre.gamma, atol=1e-15)


def test_accel_bias_correction_is_exact_without_rotation():
    pre = preintegrate(constant_samples([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]), np.zeros(3), np.zeros(3))
    alpha, beta, _ = bias_corrected(pre, [1e-3, 0.0, 0.0], np.zeros(3))
    assert_allclose(alpha, [0.5 - 0.5e-3, 0.0, 0.0], atol=1e-9)
    assert_allclose(beta, [1.0 - 1e-3, 0.0, 0.0], atol=1e-9)


def test_gyro_bias_correction_tracks_reintegration(rng):
    samples = _random_batch(rng, n=100)
    pre = preintegrate(samples, np.zeros(3), np.zeros(3))
    dbg = np.array([1e-3, -5e-4, 2e-4])
    _, _, gamma = bias_corrected(pre, np.zeros(3), dbg)
    exact = preintegrate(samples, np.zeros(3), dbg)
    assert np.linalg.norm(rotvec_from_quat(quat_mul(quat_conj(exact.gamma), gamma))) < 1e-6


def test_large_bias_change_requires_repropagation(rng):
    pre = preintegrate(_random_batch(rng), np.zeros(3), np.zeros(3))
    with pytest.raises(RelinearizationRequired):
        bias_corrected(pre, [0.2, 0.0, 0.0], np.zeros(3))
    with pytest.raises(RelinearizationRequired):
        bias_corrected(pre, np.zeros(3), [0.0, 0.0, 0.2])


def test_predicted_state_has_zero_residual(rng):
    for _ in range(20):
        xi = random_state(rng)
        pre = preintegrate(_random_batch(rng), xi.b_a, xi.b_g)
        xj = predict_state(xi, pre, WORLD, pre.dt_total, 0.0, np.zeros(3))
        assert_allclose(imu_residual(pre, xi, xj, WORLD), np.zeros(ERROR_DIM), atol=1e-9)


def test_position_perturbation_enters_rotated(rng):
    xi = random_state(rng)
    pre = preintegrate(_random_batch(rng), xi.b_a, xi.b_g)
    xj = predict_state(xi, pre, WORLD, pre.dt_total, 0.0, np.zeros(3))
    delta = np.array([0.1, -0.2, 0.05])
    shifted = boxplus(xj, np.concatenate([np.zeros(3), delta, np.zeros(9)]))
    r = imu_residual(pre, xi, shifted, WORLD)
    assert_allclose(r[RES_P], xi.R.T @ delta, atol=1e-12)
    assert_allclose(r[RES_V], np.zeros(3), atol=1e-9)


def test_simple_jacobian_blocks(rng):
    xi, xj = random_state(rng), random_state(rng)
    pre = preintegrate(_random_batch(rng), xi.b_a, xi.b_g)
    J_i, J_j = imu_residual_jacobians(pre, xi, xj, WORLD)
    assert_allclose(J_i[RES_BA, 9:12], -np.eye(3))
    assert_allclose(J_j[RES_BG, 12:15], np.eye(3))
    assert_allclose(J_j[RES_V, VEL], xi.R.T)
    assert_allclose(J_j[RES_P, POS], xi.R.T)


def test_jacobians_match_finite_differences():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lin_ba, lin_bg = rng.normal(0.0, 0.02, 3), rng.normal(0.0, 0.005, 3)
        pre = preintegrate(_random_batch(rng, n=30), lin_ba, lin_bg)
        xi = random_state(rng)
        xi = ImuKeyState(xi.q, xi.p, xi.v, lin_ba + rng.normal(0.0, 0.01, 3), lin_bg + rng.normal(0.0, 0.01, 3))
        guess = predict_state(xi, pre, WORLD, pre.dt_total, 0.0, np.zeros(3))
        xj = boxplus(guess, rng.normal(0.0, 0.05, ERROR_DIM))
        J_i, J_j = imu_residual_jacobians(pre, xi, xj, WORLD)
        assert_jacobian_close(J_i, numeric_state_jacobian(lambda x: imu_residual(pre, x, xj, WORLD), xi))
        assert_jacobian_close(J_j, numeric_state_jacobian(lambda x: imu_residual(pre, xi, x, WORLD), xj))


def test_batch_between_interpolates_boundaries():
    samples = [ImuSample(k * 0.01, [k, 0.0, 0.0], [0.0, 0.0, 2.0 * k]) for k in range(11)]
    batch = batch_between(samples, 0.015, 0.047)
    assert batch[0].t == pytest.approx(0.015)
    assert batch[-1].t == pytest.approx(0.047)
    assert_allclose(batch[0].accel, [1.5, 0.0, 0.0], atol=1e-12)
    assert_allclose(batch[-1].gyro, [0.0, 0.0, 9.4], atol=1e-12)
    assert [s.t for s in batch[1:-1]] == pytest.approx([0.02, 0.03, 0.04])


def test_batch_between_requires_coverage():
    samples = [ImuSample(k * 0.01, np.zeros(3), np.zeros(3)) for k in range(5)]
    with pytest.raises(ImuGapError):
        batch_between(samples, 0.01, 0.08)


def test_noise_model_validates():
    with pytest.raises(ValueError):
        ImuNoise(accel_noise_density=-1.0)
    assert_allclose(np.diag(ImuNoise().discrete_covariance(0.01))[:3], (2.0e-3) ** 2 / 0.01)


def test_residual_layout_constants():
    assert [RES_P, RES_V, RES_R, RES_BA, RES_BG] == [slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)]
