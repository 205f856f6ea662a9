"""Adapters that expose inertial and visual residuals as solver factors."""

from __future__ import annotations

import logging
from typing import Any, Sequence

import numpy as np

from enums import FactorKind
from errors import RelinearizationRequired
from imu_preintegration import (
    RELINEARIZATION_THRESHOLD,
    Preintegration,
    bias_corrected,
    imu_residual,
    imu_residual_jacobians,
    repropagate,
    sqrt_information,
)
from manifold_state import WorldConstants
from nlls_solver import JacobianBlock, Linearization
from visual_factors import STATUS_OK, PoseBatch, VisualModel, evaluate_invdepth, evaluate_xyz

TD_KEY = "td"


def _single_block(key: str, jac: np.ndarray) -> JacobianBlock:
    return JacobianBlock([key], np.zeros(1, dtype=int), jac[None])


class InertialFactor:
    kind = FactorKind.INERTIAL

    def __init__(
        self,
        key_i: str,
        key_j: str,
        preint: Preintegration,
        world: WorldConstants,
        relinearization_threshold: float = RELINEARIZATION_THRESHOLD,
    ):
        self.key_i = key_i
        self.key_j = key_j
        self.world = world
        self.relinearization_threshold = relinearization_threshold
        self._set_preintegration(preint)

    def _set_preintegration(self, preint: Preintegration) -> None:
        self.preint = preint
        self.whitening = sqrt_information(preint.cov)

    def variables(self) -> set[str]:
        return {self.key_i, self.key_j}

    def refresh(self, values: dict[str, Any]) -> bool:
        """
        Re-propagates the raw samples when the bias of `key_i` moved past the threshold.
        Only call at accepted estimates; returns whether the preintegration changed.
        """
        xi = values[self.key_i]
        try:
            bias_corrected(self.preint, xi.b_a, xi.b_g, self.relinearization_threshold)
        except RelinearizationRequired as e:
            logging.warning(f"Re-propagating {self.key_i}->{self.key_j}: {e}")
            self._set_preintegration(repropagate(self.preint, xi.b_a, xi.b_g))
            return True
        return False

    def linearize(self, values: dict[str, Any], with_jacobians: bool = True) -> Linearization:
        # First-order bias correction at any distance; refresh() owns re-propagation.
        xi, xj = values[self.key_i], values[self.key_j]
        r = imu_residual(self.preint, xi, xj, self.world, np.inf)
        jacs = imu_residual_jacobians(self.preint, xi, xj, self.world, np.inf) if with_jacobians else None
        W = self.whitening
        blocks = []
        if jacs is not None:
            blocks = [_single_block(self.key_i, W @ jacs[0]), _single_block(self.key_j, W @ jacs[1])]
        return Linearization(self.kind, (W @ r)[None], blocks, np.ones(1, dtype=bool))


def _index(keys: Sequence[str]) -> tuple[list[str], np.ndarray]:
    unique = list(dict.fromkeys(keys))
    lookup = {k: i for i, k in enumerate(unique)}
    return unique, np.array([lookup[k] for k in keys], dtype=int)


class _VisualBatch:
    def __init__(self, model: VisualModel, huber_threshold: float | None):
        self.model = model
        self.huber_threshold = huber_threshold

    def _poses(self, values: dict[str, Any]) -> PoseBatch:
        td = float(values[TD_KEY])
        return PoseBatch.from_states([values[k] for k in self.state_keys], td)

    def variables(self) -> set[str]:
        return set(self.state_keys) | set(self.feature_keys) | {TD_KEY}


class XyzFactorBatch(_VisualBatch):
    """All 3D-point reprojection residuals of one window, evaluated in one kernel call."""

    kind = FactorKind.VISUAL_XYZ

    def __init__(
        self,
        target_keys: Sequence[str],
        feature_keys: Sequence[str],
        z: np.ndarray,
        model: VisualModel,
        huber_threshold: float | None = 1.0,
    ):
        super().__init__(model, huber_threshold)
        self.state_keys, self.target_idx = _index(target_keys)
        self.feature_keys, self.feature_idx = _index(feature_keys)
        self.z = np.asarray(z, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.z)

    def linearize(self, values: dict[str, Any], with_jacobians: bool = True) -> Linearization:
        poses = self._poses(values).take(self.target_idx)
        points = np.stack([values[k] for k in self.feature_keys])[self.feature_idx]
        ev = evaluate_xyz(poses, points, self.z, self.model, with_jacobians)
        blocks = []
        if with_jacobians:
            zeros = np.zeros(len(self.z), dtype=int)
            blocks = [
                JacobianBlock(self.state_keys, self.target_idx, ev.J_pose),
                JacobianBlock(self.feature_keys, self.feature_idx, ev.J_feat),
                JacobianBlock([TD_KEY], zeros, ev.J_td[:, :, None]),
            ]
        return Linearization(self.kind, ev.residual, blocks, ev.status == STATUS_OK, self.huber_threshold)


class InvDepthFactorBatch(_VisualBatch):
    """All anchored inverse-depth reprojection residuals of one window."""

    kind = FactorKind.VISUAL_INVDEPTH

    def __init__(
        self,
        anchor_keys: Sequence[str],
        target_keys: Sequence[str],
        feature_keys: Sequence[str],
        anchor_obs: np.ndarray,
        z: np.ndarray,
        model: VisualModel,
        huber_threshold: float | None = 1.0,
    ):
        super().__init__(model, huber_threshold)
        self.state_keys, idx = _index(list(anchor_keys) + list(target_keys))
        self.anchor_idx, self.target_idx = np.split(idx, 2)
        self.feature_keys, self.feature_idx = _index(feature_keys)
        self.anchor_obs = np.asarray(anchor_obs, dtype=float).reshape(-1, 2)
        self.z = np.asarray(z, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.z)

    def linearize(self, values: dict[str, Any], with_jacobians: bool = True) -> Linearization:
        poses = self._poses(values)
        lam = np.array([values[k] for k in self.feature_keys], dtype=float)[self.feature_idx]
        ev = evaluate_invdepth(
            poses.take(self.anchor_idx),
            poses.take(self.target_idx),
            lam,
            self.anchor_obs,
            self.z,
            self.model,
            with_jacobians,
        )
        blocks = []
        if with_jacobians:
            zeros = np.zeros(len(self.z), dtype=int)
            blocks = [
                JacobianBlock(self.state_keys, self.anchor_idx, ev.J_pose_i),
                JacobianBlock(self.state_keys, self.target_idx, ev.J_pose_j),
                JacobianBlock(self.feature_keys, self.feature_idx, ev.J_lambda[:, :, None]),
                JacobianBlock([TD_KEY], zeros, ev.J_td[:, :, None]),
            ]
        return Linearization(self.kind, ev.residual, blocks, ev.status == STATUS_OK, self.huber_threshold)
