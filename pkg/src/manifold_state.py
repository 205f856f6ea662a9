"""
Navigation state, error state and the SO(3) x R^12 retraction used by every factor.

Conventions: quaternions are stored (w, x, y, z), use the Hamilton product and rotate
body to world. Rotation errors are local: R(q ⊗ Exp(dtheta)).
All quaternion helpers accept arrays with arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

ERROR_DIM = 15
ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)

SMALL_ANGLE = 1e-8
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    v = aw * bv + bw * av + np.cross(av, bv)
    return np.concatenate([w, v], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_from_rot(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to a (w, x, y, z) quaternion with w >= 0."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def quat_from_small_angle(theta: np.ndarray) -> np.ndarray:
    """
    Exact quaternion exponential Exp(theta) of a rotation vector.

    Below SMALL_ANGLE the first-order series (1, theta/2) is used and renormalized.
    """
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    small = angle < SMALL_ANGLE
    safe_angle = np.where(small, 1.0, angle)
    w = np.where(small, 1.0, np.cos(0.5 * angle))
    scale = np.where(small, 0.5, np.sin(0.5 * angle) / safe_angle)
    q = np.concatenate([w[..., None], scale[..., None] * theta], axis=-1)
    return quat_normalize(q)


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Exact logarithm of a unit quaternion, returned as a rotation vector."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    vec = q[..., 1:]
    n = np.linalg.norm(vec, axis=-1)
    small = n < 1e-12
    angle = 2.0 * np.arctan2(n, q[..., 0])
    scale = np.where(small, 2.0 / np.maximum(q[..., 0], 1e-300), angle / np.where(small, 1.0, n))
    return scale[..., None] * vec


def rot_exp(theta: np.ndarray) -> np.ndarray:
    return quat_to_rot(quat_from_small_angle(theta))


def quat_left_matrix(p: np.ndarray) -> np.ndarray:
    """L(p) with p ⊗ q = L(p) q."""
    w, x, y, z = p
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """R(q) with p ⊗ q = R(q) p."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ≈ Exp(phi) Exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    K2 = K @ K
    small = angle < 1e-5
    a2 = np.where(small, 1.0, angle**2)
    a3 = np.where(small, 1.0, angle**3)
    c1 = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(angle)) / a2)
    c2 = np.where(small, 1.0 / 6.0 - angle**2 / 120.0, (angle - np.sin(angle)) / a3)
    return np.eye(3) - c1 * K + c2 * K2


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    K2 = K @ K
    small = angle < 1e-5
    safe = np.where(small, 1.0, angle)
    c2 = np.where(
        small,
        1.0 / 12.0 + angle**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    return np.eye(3) + 0.5 * K + c2 * K2


def _vec3(value) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(3)
    return arr


@dataclass(frozen=True, eq=False)
class ImuKeyState:
    """
    Navigation state attached to one sliding-window slot.

    `t_dj` is the time offset in force when the slot was created and never changes.
    `gyro_raw` is the gyro sample at `t_stamp`; `omega_body` is derived from it so that
    bias updates are reflected without going back to the IMU buffer.
    """

    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_stamp: float = 0.0
    t_dj: float = 0.0
    gyro_raw: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(4)
        object.__setattr__(self, "q", q / np.linalg.norm(q))
        for name in ("p", "v", "b_a", "b_g", "gyro_raw"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        object.__setattr__(self, "t_stamp", float(self.t_stamp))
        object.__setattr__(self, "t_dj", float(self.t_dj))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    @property
    def omega_body(self) -> np.ndarray:
        return self.gyro_raw - self.b_g


@dataclass(frozen=True, eq=False)
class ErrorState:
    dtheta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    db_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    db_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("dtheta", "dp", "dv", "db_a", "db_g"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dtheta, self.dp, self.dv, self.db_a, self.db_g])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> ErrorState:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (ERROR_DIM,):
            raise ValueError(f"error state must have {ERROR_DIM} entries, got {vec.shape}")
        return cls(vec[ROT], vec[POS], vec[VEL], vec[BA], vec[BG])


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """Camera-to-IMU rotation and the camera origin expressed in the IMU frame."""

    R_ic: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_ic: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R_ic, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R_ic must be a proper rotation matrix")
        object.__setattr__(self, "R_ic", R)
        object.__setattr__(self, "p_ic", _vec3(self.p_ic))


@dataclass(frozen=True, eq=False)
class WorldConstants:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    allow_nonstandard_gravity: bool = False

    def __post_init__(self):
        g = _vec3(self.gravity)
        if not self.allow_nonstandard_gravity and not 9.7 <= np.linalg.norm(g) <= 9.9:
            raise ValueError(f"gravity magnitude {np.linalg.norm(g):.3f} outside [9.7, 9.9]")
        object.__setattr__(self, "gravity", g)


def boxplus(state: ImuKeyState, delta: ErrorState | np.ndarray) -> ImuKeyState:
    if not isinstance(delta, ErrorState):
        delta = ErrorState.from_vector(delta)
    q = quat_normalize(quat_mul(state.q, quat_from_small_angle(delta.dtheta)))
    return replace(
        state,
        q=q,
        p=state.p + delta.dp,
        v=state.v + delta.dv,
        b_a=state.b_a + delta.db_a,
        b_g=state.b_g + delta.db_g,
    )


def boxminus(a: ImuKeyState, b: ImuKeyState) -> ErrorState:
    dq = quat_mul(quat_conj(b.q), a.q)
    return ErrorState(
        dtheta=rotvec_from_quat(dq),
        dp=a.p - b.p,
        dv=a.v - b.v,
        db_a=a.b_a - b.b_a,
        db_g=a.b_g - b.b_g,
    )
