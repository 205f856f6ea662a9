"""
IMU preintegration between consecutive key states and the 15-dimensional inertial factor.

Preintegrated quantities and their covariance are ordered like the inertial residual:
position (alpha), velocity (beta), attitude (gamma), accelerometer bias, gyro bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from errors import ImuGapError, RelinearizationRequired
from manifold_state import (
    BA,
    BG,
    ERROR_DIM,
    IDENTITY_QUAT,
    POS,
    ROT,
    VEL,
    ImuKeyState,
    WorldConstants,
    quat_conj,
    quat_from_small_angle,
    quat_left_matrix,
    quat_mul,
    quat_normalize,
    quat_right_matrix,
    quat_to_rot,
    right_jacobian,
    skew,
)

# residual / preintegration covariance layout
RES_P = slice(0, 3)
RES_V = slice(3, 6)
RES_R = slice(6, 9)
RES_BA = slice(9, 12)
RES_BG = slice(12, 15)

MAX_SAMPLE_GAP = 0.1
RELINEARIZATION_THRESHOLD = 0.1
COV_JITTER = 1e-12


@dataclass(frozen=True, eq=False)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "accel", np.array(self.accel, dtype=float).reshape(3))
        object.__setattr__(self, "gyro", np.array(self.gyro, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities; defaults are the simulation values of the method."""

    accel_noise_density: float = 2.0e-3
    gyro_noise_density: float = 1.6968e-4
    accel_random_walk: float = 3.0e-3
    gyro_random_walk: float = 1.9393e-5

    def __post_init__(self):
        for name, value in vars(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def discrete_covariance(self, dt: float) -> np.ndarray:
        """Per-step covariance of [n_a0, n_g0, n_a1, n_g1, n_ba, n_bg]."""
        a = self.accel_noise_density**2 / dt
        g = self.gyro_noise_density**2 / dt
        wa = self.accel_random_walk**2 / dt
        wg = self.gyro_random_walk**2 / dt
        return np.diag(np.repeat([a, g, a, g, wa, wg], 3))


@dataclass(frozen=True, eq=False)
class Preintegration:
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    dt_total: float = 0.0
    cov: np.ndarray = field(default_factory=lambda: np.zeros((ERROR_DIM, ERROR_DIM)))
    jacobian: np.ndarray = field(default_factory=lambda: np.eye(ERROR_DIM))
    lin_ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lin_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise: ImuNoise = field(default_factory=ImuNoise)
    samples: tuple[ImuSample, ...] = ()

    @property
    def J_bias_a(self) -> np.ndarray:
        """Sensitivity of (alpha, beta, gamma) to the accelerometer bias, stacked 9x3."""
        return self.jacobian[0:9, RES_BA]

    @property
    def J_bias_g(self) -> np.ndarray:
        return self.jacobian[0:9, RES_BG]


def interpolate_sample(s0: ImuSample, s1: ImuSample, t: float) -> ImuSample:
    if s1.t == s0.t:
        return replace(s0, t=t)
    w = (t - s0.t) / (s1.t - s0.t)
    return ImuSample(t, (1 - w) * s0.accel + w * s1.accel, (1 - w) * s0.gyro + w * s1.gyro)


def batch_between(samples: Sequence[ImuSample], t_start: float, t_end: float) -> list[ImuSample]:
    """
    Cuts the batch covering [t_start, t_end] out of a time-ordered sample list,
    with the first and last samples interpolated to the exact boundaries.

    Raises:
        ImuGapError: When the samples do not bracket the interval.
    """
    if t_end <= t_start:
        raise ImuGapError(f"empty interval [{t_start:.6f}, {t_end:.6f}]")
    times = np.fromiter((s.t for s in samples), dtype=float, count=len(samples))
    if len(samples) < 2 or times[0] > t_start or times[-1] < t_end:
        raise ImuGapError(f"IMU samples do not cover [{t_start:.6f}, {t_end:.6f}]")
    i0 = max(int(np.searchsorted(times, t_start, side="right")) - 1, 0)
    i1 = min(int(np.searchsorted(times, t_end, side="left")), len(samples) - 1)
    batch = [interpolate_sample(samples[i0], samples[min(i0 + 1, i1)], t_start)]
    batch.extend(s for s in samples[i0 + 1 : i1] if t_start < s.t < t_end)
    batch.append(interpolate_sample(samples[max(i1 - 1, i0)], samples[i1], t_end))
    return [s for k, s in enumerate(batch) if k == 0 or s.t > batch[k - 1].t]


def integrate(preint: Preintegration, s0: ImuSample, s1: ImuSample) -> Preintegration:
    """One midpoint step over [s0.t, s1.t] at the linearization biases."""
    dt = s1.t - s0.t
    if not 0.0 < dt <= MAX_SAMPLE_GAP:
        raise ImuGapError(f"invalid IMU step dt={dt:.6f}s between t={s0.t:.6f} and t={s1.t:.6f}")

    a0 = s0.accel - preint.lin_ba
    a1 = s1.accel - preint.lin_ba
    w = 0.5 * (s0.gyro + s1.gyro) - preint.lin_bg

    dq = quat_from_small_angle(w * dt)
    gamma1 = quat_normalize(quat_mul(preint.gamma, dq))
    R0 = quat_to_rot(preint.gamma)
    R1 = quat_to_rot(gamma1)
    acc = 0.5 * (R0 @ a0 + R1 @ a1)
    alpha1 = preint.alpha + preint.beta * dt + 0.5 * acc * dt * dt
    beta1 = preint.beta + acc * dt

    I3 = np.eye(3)
    dR_T = quat_to_rot(dq).T
    Ra0x = R0 @ skew(a0)
    Ra1x = R1 @ skew(a1)

    F = np.eye(ERROR_DIM)
    F[RES_P, RES_R] = -0.25 * dt * dt * (Ra0x + Ra1x @ dR_T)
    F[RES_P, RES_V] = I3 * dt
    F[RES_P, RES_BA] = -0.25 * (R0 + R1) * dt * dt
    F[RES_P, RES_BG] = 0.25 * Ra1x * dt**3
    F[RES_V, RES_R] = -0.5 * dt * (Ra0x + Ra1x @ dR_T)
    F[RES_V, RES_BA] = -0.5 * (R0 + R1) * dt
    F[RES_V, RES_BG] = 0.5 * Ra1x * dt * dt
    F[RES_R, RES_R] = dR_T
    F[RES_R, RES_BG] = -I3 * dt

    G = np.zeros((ERROR_DIM, 18))
    G[RES_P, 0:3] = 0.25 * R0 * dt * dt
    G[RES_P, 3:6] = -0.125 * Ra1x * dt**3
    G[RES_P, 6:9] = 0.25 * R1 * dt * dt
    G[RES_P, 9:12] = G[RES_P, 3:6]
    G[RES_V, 0:3] = 0.5 * R0 * dt
    G[RES_V, 3:6] = -0.25 * Ra1x * dt * dt
    G[RES_V, 6:9] = 0.5 * R1 * dt
    G[RES_V, 9:12] = G[RES_V, 3:6]
    G[RES_R, 3:6] = 0.5 * I3 * dt
    G[RES_R, 9:12] = 0.5 * I3 * dt
    G[RES_BA, 12:15] = I3 * dt
    G[RES_BG, 15:18] = I3 * dt

    cov = F @ preint.cov @ F.T + G @ preint.noise.discrete_covariance(dt) @ G.T
    return replace(
        preint,
        alpha=alpha1,
        beta=beta1,
        gamma=gamma1,
        dt_total=preint.dt_total + dt,
        cov=0.5 * (cov + cov.T),
        jacobian=F @ preint.jacobian,
    )


def preintegrate(
    samples: Iterable[ImuSample],
    lin_ba: np.ndarray,
    lin_bg: np.ndarray,
    noise: ImuNoise | None = None,
) -> Preintegration:
    """Integrates a whole batch; the batch is kept for later re-propagation."""
    samples = tuple(samples)
    preint = Preintegration(
        lin_ba=np.array(lin_ba, dtype=float),
        lin_bg=np.array(lin_bg, dtype=float),
        noise=noise or ImuNoise(),
    )
    for s0, s1 in zip(samples[:-1], samples[1:]):
        preint = integrate(preint, s0, s1)
    return replace(preint, samples=samples)


def repropagate(preint: Preintegration, ba: np.ndarray, bg: np.ndarray) -> Preintegration:
    return preintegrate(preint.samples, ba, bg, preint.noise)


def bias_corrected(
    preint: Preintegration,
    ba: np.ndarray,
    bg: np.ndarray,
    threshold: float = RELINEARIZATION_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    First-order bias update of (alpha, beta, gamma).

    Raises:
        RelinearizationRequired: When either bias moved more than `threshold`.
    """
    dba = np.asarray(ba, dtype=float) - preint.lin_ba
    dbg = np.asarray(bg, dtype=float) - preint.lin_bg
    if np.linalg.norm(dba) > threshold or np.linalg.norm(dbg) > threshold:
        raise RelinearizationRequired(
            f"bias change |dba|={np.linalg.norm(dba):.4f}, |dbg|={np.linalg.norm(dbg):.4f}"
        )
    J = preint.jacobian
    alpha = preint.alpha + J[RES_P, RES_BA] @ dba + J[RES_P, RES_BG] @ dbg
    beta = preint.beta + J[RES_V, RES_BA] @ dba + J[RES_V, RES_BG] @ dbg
    gamma = quat_normalize(quat_mul(preint.gamma, quat_from_small_angle(J[RES_R, RES_BG] @ dbg)))
    return alpha, beta, gamma


def predict_state(
    xj: ImuKeyState,
    preint: Preintegration,
    world: WorldConstants,
    t_stamp: float,
    t_dj: float,
    gyro_raw: np.ndarray,
) -> ImuKeyState:
    """Propagates `xj` over the preintegrated interval; biases are carried over."""
    alpha, beta, gamma = bias_corrected(preint, xj.b_a, xj.b_g, threshold=np.inf)
    dt = preint.dt_total
    g = world.gravity
    Rj = xj.R
    return ImuKeyState(
        q=quat_normalize(quat_mul(xj.q, gamma)),
        p=xj.p + xj.v * dt + 0.5 * g * dt * dt + Rj @ alpha,
        v=xj.v + g * dt + Rj @ beta,
        b_a=xj.b_a,
        b_g=xj.b_g,
        t_stamp=t_stamp,
        t_dj=t_dj,
        gyro_raw=gyro_raw,
    )


def _attitude_error(gamma: np.ndarray, xj: ImuKeyState, xj1: ImuKeyState) -> np.ndarray:
    return quat_mul(quat_conj(gamma), quat_mul(quat_conj(xj.q), xj1.q))


def imu_residual(
    preint: Preintegration,
    xj: ImuKeyState,
    xj1: ImuKeyState,
    world: WorldConstants,
    threshold: float = RELINEARIZATION_THRESHOLD,
) -> np.ndarray:
    """Predicted-minus-preintegrated inertial residual (unwhitened)."""
    alpha, beta, gamma = bias_corrected(preint, xj.b_a, xj.b_g, threshold)
    dt = preint.dt_total
    g = world.gravity
    Rj_T = xj.R.T
    r = np.zeros(ERROR_DIM)
    r[RES_P] = Rj_T @ (xj1.p - xj.p - xj.v * dt - 0.5 * g * dt * dt) - alpha
    r[RES_V] = Rj_T @ (xj1.v - xj.v - g * dt) - beta
    r[RES_R] = 2.0 * _attitude_error(gamma, xj, xj1)[1:]
    r[RES_BA] = xj1.b_a - xj.b_a
    r[RES_BG] = xj1.b_g - xj.b_g
    return r


def imu_residual_jacobians(
    preint: Preintegration,
    xj: ImuKeyState,
    xj1: ImuKeyState,
    world: WorldConstants,
    threshold: float = RELINEARIZATION_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of `imu_residual` w.r.t. the error states of xj and xj1."""
    _, _, gamma = bias_corrected(preint, xj.b_a, xj.b_g, threshold)
    dt = preint.dt_total
    g = world.gravity
    Rj_T = xj.R.T
    J = preint.jacobian
    I3 = np.eye(3)

    E = _attitude_error(gamma, xj, xj1)
    B = quat_mul(quat_conj(xj.q), xj1.q)
    correction = J[RES_R, RES_BG] @ (xj.b_g - preint.lin_bg)

    J_i = np.zeros((ERROR_DIM, ERROR_DIM))
    J_i[RES_P, ROT] = skew(Rj_T @ (xj1.p - xj.p - xj.v * dt - 0.5 * g * dt * dt))
    J_i[RES_P, POS] = -Rj_T
    J_i[RES_P, VEL] = -Rj_T * dt
    J_i[RES_P, BA] = -J[RES_P, RES_BA]
    J_i[RES_P, BG] = -J[RES_P, RES_BG]
    J_i[RES_V, ROT] = skew(Rj_T @ (xj1.v - xj.v - g * dt))
    J_i[RES_V, VEL] = -Rj_T
    J_i[RES_V, BA] = -J[RES_V, RES_BA]
    J_i[RES_V, BG] = -J[RES_V, RES_BG]
    J_i[RES_R, ROT] = -(quat_left_matrix(quat_conj(gamma)) @ quat_right_matrix(B))[1:, 1:]
    J_i[RES_R, BG] = -quat_right_matrix(E)[1:, 1:] @ right_jacobian(correction) @ J[RES_R, RES_BG]
    J_i[RES_BA, BA] = -I3
    J_i[RES_BG, BG] = -I3

    J_j = np.zeros((ERROR_DIM, ERROR_DIM))
    J_j[RES_P, POS] = Rj_T
    J_j[RES_V, VEL] = Rj_T
    J_j[RES_R, ROT] = quat_left_matrix(E)[1:, 1:]
    J_j[RES_BA, BA] = I3
    J_j[RES_BG, BG] = I3
    return J_i, J_j


def sqrt_information(cov: np.ndarray) -> np.ndarray:
    """Whitening matrix W with W cov W^T = I, from a jittered Cholesky factor."""
    cov = 0.5 * (cov + cov.T)
    L = cholesky(cov + COV_JITTER * np.eye(cov.shape[0]), lower=True)
    return solve_triangular(L, np.eye(cov.shape[0]), lower=True)
