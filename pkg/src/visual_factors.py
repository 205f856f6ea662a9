"""
Feature parameterizations, time-offset pose compensation and the compensated reprojection
residuals with their analytic Jacobians.

Every residual is evaluated by a batched kernel over N observations; the single-observation
functions below are thin wrappers that raise on invalid geometry instead of returning a
status code. Residuals are `(z - projection) / sigma_px` in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from enums import CompensationJacobian
from errors import BehindCamera, DegenerateDepth, OffsetOutOfRange
from manifold_state import (
    BG,
    ERROR_DIM,
    POS,
    ROT,
    VEL,
    CameraExtrinsics,
    ImuKeyState,
    quat_to_rot,
    right_jacobian,
    rot_exp,
    skew,
)

MIN_DEPTH = 1e-6
MAX_COMPENSATION = 0.1

STATUS_OK = 0
STATUS_BEHIND = 1
STATUS_OFFSET = 2
STATUS_DEPTH = 3


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 376.0
    cy: float = 240.0
    width: int = 752
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixel coordinates to normalized image-plane coordinates."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)


@dataclass(frozen=True, eq=False)
class FeatureXYZ:
    id: int
    p_world: np.ndarray

    def __post_init__(self):
        p = np.array(self.p_world, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError(f"feature {self.id} has a non-finite position")
        object.__setattr__(self, "p_world", p)


@dataclass(frozen=True, eq=False)
class FeatureInvDepth:
    id: int
    lam: float
    anchor_idx: int
    anchor_obs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "anchor_obs", np.array(self.anchor_obs, dtype=float).reshape(2))


@dataclass(frozen=True, eq=False)
class Observation:
    feature_id: int
    frame_idx: int
    z: np.ndarray
    sigma_px: float = 1.0

    def __post_init__(self):
        if not self.sigma_px > 0:
            raise ValueError(f"sigma_px must be positive, got {self.sigma_px}")
        object.__setattr__(self, "z", np.array(self.z, dtype=float).reshape(2))


@dataclass(frozen=True)
class TimeOffset:
    td: float = 0.0

    def __post_init__(self):
        if not abs(self.td) < 0.5:
            raise ValueError(f"time offset {self.td:.4f}s outside the +/-0.5s sanity bound")


@dataclass(frozen=True, eq=False)
class VisualModel:
    """Everything a reprojection residual needs besides the variables themselves."""

    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    sigma_px: float = 1.0
    min_inverse_depth: float = 1e-4
    compensation: CompensationJacobian = CompensationJacobian.POSE_ONLY

    def __post_init__(self):
        if not self.sigma_px > 0:
            raise ValueError(f"sigma_px must be positive, got {self.sigma_px}")


@dataclass(frozen=True, eq=False)
class PoseBatch:
    """Stacked key-state quantities the compensation needs, one row per observation."""

    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    delta: np.ndarray

    @classmethod
    def from_states(cls, states: Sequence[ImuKeyState], td: float) -> PoseBatch:
        return cls(
            R=quat_to_rot(np.stack([s.q for s in states])),
            p=np.stack([s.p for s in states]),
            v=np.stack([s.v for s in states]),
            omega=np.stack([s.omega_body for s in states]),
            delta=np.array([td - s.t_dj for s in states]),
        )

    def take(self, idx: np.ndarray) -> PoseBatch:
        return PoseBatch(self.R[idx], self.p[idx], self.v[idx], self.omega[idx], self.delta[idx])


@dataclass(frozen=True, eq=False)
class _Compensated:
    R: np.ndarray
    p: np.ndarray
    E: np.ndarray
    Jr: np.ndarray
    out_of_range: np.ndarray


def _compensate(pose: PoseBatch) -> _Compensated:
    phi = pose.omega * pose.delta[:, None]
    E = rot_exp(phi)
    return _Compensated(
        R=pose.R @ E,
        p=pose.p + pose.v * pose.delta[:, None],
        E=E,
        Jr=right_jacobian(phi),
        out_of_range=np.abs(pose.delta) >= MAX_COMPENSATION,
    )


@dataclass(frozen=True, eq=False)
class _Projection:
    comp: _Compensated
    P_imu: np.ndarray
    residual: np.ndarray
    dr_dPimu: np.ndarray
    behind: np.ndarray


def _project(pose: PoseBatch, P_world: np.ndarray, z: np.ndarray, model: VisualModel) -> _Projection:
    comp = _compensate(pose)
    ext = model.extrinsics
    K = model.intrinsics
    P_imu = np.einsum("nji,nj->ni", comp.R, P_world - comp.p)
    P_cam = (P_imu - ext.p_ic) @ ext.R_ic
    X, Y, Z = P_cam[:, 0], P_cam[:, 1], P_cam[:, 2]
    behind = Z <= MIN_DEPTH
    Zs = np.where(behind, 1.0, Z)
    proj = np.stack([K.fx * X / Zs + K.cx, K.fy * Y / Zs + K.cy], axis=-1)
    residual = (z - proj) / model.sigma_px

    dr_dPcam = np.zeros((len(Z), 2, 3))
    dr_dPcam[:, 0, 0] = K.fx / Zs
    dr_dPcam[:, 0, 2] = -K.fx * X / Zs**2
    dr_dPcam[:, 1, 1] = K.fy / Zs
    dr_dPcam[:, 1, 2] = -K.fy * Y / Zs**2
    dr_dPcam *= -1.0 / model.sigma_px
    return _Projection(comp, P_imu, residual, dr_dPcam @ ext.R_ic.T, behind)


def _target_pose_jacobian(proj: _Projection, pose: PoseBatch, model: VisualModel) -> np.ndarray:
    comp = proj.comp
    A = proj.dr_dPimu
    RcT = np.swapaxes(comp.R, 1, 2)
    J = np.zeros((len(A), 2, ERROR_DIM))
    J[:, :, ROT] = A @ skew(proj.P_imu) @ np.swapaxes(comp.E, 1, 2)
    J[:, :, POS] = -A @ RcT
    if model.compensation is CompensationJacobian.EXACT:
        d = pose.delta[:, None, None]
        J[:, :, VEL] = -A @ RcT * d
        J[:, :, BG] = -A @ skew(proj.P_imu) @ comp.Jr * d
    return J


def _target_td_jacobian(proj: _Projection, pose: PoseBatch) -> np.ndarray:
    comp = proj.comp
    rot_rate = np.einsum("nij,nj->ni", skew(proj.P_imu) @ comp.Jr, pose.omega)
    trans_rate = np.einsum("nji,nj->ni", comp.R, pose.v)
    return np.einsum("nij,nj->ni", proj.dr_dPimu, rot_rate - trans_rate)


@dataclass(frozen=True, eq=False)
class XyzEvaluation:
    residual: np.ndarray
    J_pose: np.ndarray
    J_feat: np.ndarray
    J_td: np.ndarray
    status: np.ndarray


@dataclass(frozen=True, eq=False)
class InvDepthEvaluation:
    residual: np.ndarray
    J_pose_i: np.ndarray
    J_pose_j: np.ndarray
    J_lambda: np.ndarray
    J_td: np.ndarray
    status: np.ndarray


def evaluate_xyz(
    pose: PoseBatch,
    P_world: np.ndarray,
    z: np.ndarray,
    model: VisualModel,
    with_jacobians: bool = True,
) -> XyzEvaluation:
    """Batched compensated 3D-point residual; `status` flags invalid rows instead of raising."""
    P_world = np.asarray(P_world, dtype=float).reshape(-1, 3)
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    proj = _project(pose, P_world, z, model)
    status = np.where(proj.comp.out_of_range, STATUS_OFFSET, np.where(proj.behind, STATUS_BEHIND, STATUS_OK))
    if not with_jacobians:
        return XyzEvaluation(proj.residual, None, None, None, status)
    J_feat = proj.dr_dPimu @ np.swapaxes(proj.comp.R, 1, 2)
    return XyzEvaluation(
        residual=proj.residual,
        J_pose=_target_pose_jacobian(proj, pose, model),
        J_feat=J_feat,
        J_td=_target_td_jacobian(proj, pose),
        status=status,
    )


def anchored_world_points(
    anchor: PoseBatch, lam: np.ndarray, anchor_obs: np.ndarray, model: VisualModel
) -> tuple[np.ndarray, _Compensated, np.ndarray, np.ndarray]:
    """Lifts (anchor_obs, 1) / lambda through the compensated anchor pose into the world frame."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    degenerate = lam < model.min_inverse_depth
    lam_s = np.where(degenerate, 1.0, lam)
    ray = np.concatenate([np.asarray(anchor_obs, dtype=float).reshape(-1, 2), np.ones((len(lam), 1))], axis=1)
    P_cam = ray / lam_s[:, None]
    ext = model.extrinsics
    P_body = P_cam @ ext.R_ic.T + ext.p_ic
    comp = _compensate(anchor)
    P_world = np.einsum("nij,nj->ni", comp.R, P_body) + comp.p
    return P_world, comp, P_body, degenerate


def evaluate_invdepth(
    anchor: PoseBatch,
    target: PoseBatch,
    lam: np.ndarray,
    anchor_obs: np.ndarray,
    z: np.ndarray,
    model: VisualModel,
    with_jacobians: bool = True,
) -> InvDepthEvaluation:
    lam = np.asarray(lam, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    P_world, comp_i, P_body, degenerate = anchored_world_points(anchor, lam, anchor_obs, model)
    proj = _project(target, P_world, z, model)
    status = np.where(
        comp_i.out_of_range | proj.comp.out_of_range,
        STATUS_OFFSET,
        np.where(degenerate, STATUS_DEPTH, np.where(proj.behind, STATUS_BEHIND, STATUS_OK)),
    )
    if not with_jacobians:
        return InvDepthEvaluation(proj.residual, None, None, None, None, status)

    B = proj.dr_dPimu @ np.swapaxes(proj.comp.R, 1, 2)
    J_i = np.zeros((len(lam), 2, ERROR_DIM))
    E_Pb = np.einsum("nij,nj->ni", comp_i.E, P_body)
    J_i[:, :, ROT] = -B @ anchor.R @ skew(E_Pb)
    J_i[:, :, POS] = B
    Pb_x = skew(P_body)
    if model.compensation is CompensationJacobian.EXACT:
        d = anchor.delta[:, None, None]
        J_i[:, :, VEL] = B * d
        J_i[:, :, BG] = B @ comp_i.R @ Pb_x @ comp_i.Jr * d

    lam_s = np.where(degenerate, 1.0, lam)
    dPw_dlam = -np.einsum("nij,nj->ni", comp_i.R, P_body - model.extrinsics.p_ic) / lam_s[:, None]
    J_lambda = np.einsum("nij,nj->ni", B, dPw_dlam)

    anchor_rate = anchor.v - np.einsum("nij,nj->ni", comp_i.R @ Pb_x @ comp_i.Jr, anchor.omega)
    J_td = _target_td_jacobian(proj, target) + np.einsum("nij,nj->ni", B, anchor_rate)
    return InvDepthEvaluation(
        residual=proj.residual,
        J_pose_i=J_i,
        J_pose_j=_target_pose_jacobian(proj, target, model),
        J_lambda=J_lambda,
        J_td=J_td,
        status=status,
    )


def huber_weights(residuals: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-row IRLS weights for the Huber loss on the residual norm.

    Returns:
        (sqrt_weight, rho) where rho replaces the squared norm in the cost.
    """
    sq = np.sum(residuals**2, axis=-1)
    norm = np.sqrt(sq)
    inlier = norm <= threshold
    sqrt_w = np.where(inlier, 1.0, np.sqrt(threshold / np.where(inlier, 1.0, norm)))
    rho = np.where(inlier, sq, 2.0 * threshold * norm - threshold**2)
    return sqrt_w, rho


def _raise_for_status(status: int, what: str):
    if status == STATUS_BEHIND:
        raise BehindCamera(f"{what}: point is behind the camera")
    if status == STATUS_OFFSET:
        raise OffsetOutOfRange(f"{what}: compensation interval exceeds {MAX_COMPENSATION}s")
    if status == STATUS_DEPTH:
        raise DegenerateDepth(f"{what}: inverse depth below the minimum")


def _single(x: ImuKeyState, td: TimeOffset) -> PoseBatch:
    return PoseBatch.from_states([x], td.td)


def compensate_pose(x: ImuKeyState, td: TimeOffset) -> tuple[np.ndarray, np.ndarray]:
    """IMU pose at the image-aligned instant t_stamp + (td - t_dj)."""
    comp = _compensate(_single(x, td))
    if comp.out_of_range[0]:
        raise OffsetOutOfRange(f"|td - t_dj| = {abs(td.td - x.t_dj):.4f}s")
    return comp.R[0], comp.p[0]


def pinhole_project(p_cam: np.ndarray, K: Intrinsics) -> np.ndarray:
    X, Y, Z = np.asarray(p_cam, dtype=float).reshape(3)
    if Z <= MIN_DEPTH:
        raise BehindCamera(f"depth {Z:.3g} is not in front of the camera")
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy])


def _model(ext: CameraExtrinsics, K: Intrinsics, obs: Observation, mode: CompensationJacobian) -> VisualModel:
    return VisualModel(intrinsics=K, extrinsics=ext, sigma_px=obs.sigma_px, compensation=mode)


def residual_xyz(
    obs: Observation,
    x_j: ImuKeyState,
    f: FeatureXYZ,
    ext: CameraExtrinsics,
    K: Intrinsics,
    td: TimeOffset,
) -> np.ndarray:
    ev = evaluate_xyz(_single(x_j, td), f.p_world, obs.z, _model(ext, K, obs, CompensationJacobian.POSE_ONLY), False)
    _raise_for_status(ev.status[0], f"feature {f.id}")
    return ev.residual[0]


def jacobian_xyz(
    obs: Observation,
    x_j: ImuKeyState,
    f: FeatureXYZ,
    ext: CameraExtrinsics,
    K: Intrinsics,
    td: TimeOffset,
    mode: CompensationJacobian = CompensationJacobian.POSE_ONLY,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (J_pose 2x15, J_feat 2x3, J_td 2x1)."""
    ev = evaluate_xyz(_single(x_j, td), f.p_world, obs.z, _model(ext, K, obs, mode))
    _raise_for_status(ev.status[0], f"feature {f.id}")
    return ev.J_pose[0], ev.J_feat[0], ev.J_td[0].reshape(2, 1)


def feature_world_from_anchor(
    f: FeatureInvDepth,
    x_i: ImuKeyState,
    ext: CameraExtrinsics,
    td: TimeOffset,
    min_inverse_depth: float = 1e-4,
) -> np.ndarray:
    if f.lam < min_inverse_depth:
        raise DegenerateDepth(f"feature {f.id}: inverse depth {f.lam:.3g} below {min_inverse_depth}")
    model = VisualModel(extrinsics=ext, min_inverse_depth=min_inverse_depth)
    P_world, comp, _, _ = anchored_world_points(_single(x_i, td), [f.lam], f.anchor_obs, model)
    if comp.out_of_range[0]:
        raise OffsetOutOfRange(f"feature {f.id}: anchor compensation out of range")
    return P_world[0]


def _check_anchor(obs: Observation, f: FeatureInvDepth):
    if obs.frame_idx == f.anchor_idx:
        raise ValueError(f"feature {f.id}: the anchor frame cannot observe its own feature")


def residual_invdepth(
    obs: Observation,
    x_j: ImuKeyState,
    x_i: ImuKeyState,
    f: FeatureInvDepth,
    ext: CameraExtrinsics,
    K: Intrinsics,
    td: TimeOffset,
) -> np.ndarray:
    _check_anchor(obs, f)
    model = _model(ext, K, obs, CompensationJacobian.POSE_ONLY)
    ev = evaluate_invdepth(_single(x_i, td), _single(x_j, td), [f.lam], f.anchor_obs, obs.z, model, False)
    _raise_for_status(ev.status[0], f"feature {f.id}")
    return ev.residual[0]


def jacobian_invdepth(
    obs: Observation,
    x_j: ImuKeyState,
    x_i: ImuKeyState,
    f: FeatureInvDepth,
    ext: CameraExtrinsics,
    K: Intrinsics,
    td: TimeOffset,
    mode: CompensationJacobian = CompensationJacobian.POSE_ONLY,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (J_pose_i 2x15, J_pose_j 2x15, J_lambda 2x1, J_td 2x1)."""
    _check_anchor(obs, f)
    model = _model(ext, K, obs, mode)
    ev = evaluate_invdepth(_single(x_i, td), _single(x_j, td), [f.lam], f.anchor_obs, obs.z, model)
    _raise_for_status(ev.status[0], f"feature {f.id}")
    return ev.J_pose_i[0], ev.J_pose_j[0], ev.J_lambda[0].reshape(2, 1), ev.J_td[0].reshape(2, 1)
