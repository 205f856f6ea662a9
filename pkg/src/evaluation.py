from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from errors import InsufficientOverlap
from manifold_state import quat_normalize

MIN_OVERLAP = 10


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    t: float
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "p", np.array(self.p, dtype=float).reshape(3))
        object.__setattr__(self, "q", quat_normalize(np.array(self.q, dtype=float).reshape(4)))


def umeyama_alignment(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Least-squares rigid transform (no scale) with target ≈ R @ source + t.

    Args:
        source: (N, 3) points to be aligned.
        target: (N, 3) reference points.

    Returns:
        (R, t)
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cov = (target - mu_t).T @ (source - mu_s) / len(source)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def associate(est: Sequence[TrajectoryRecord], gt: Sequence[TrajectoryRecord]) -> tuple[np.ndarray, np.ndarray]:
    """
    Pairs every estimate inside the ground-truth span with linearly interpolated truth.

    Raises:
        InsufficientOverlap: With fewer than 10 pairs.
    """
    gt_t = np.array([r.t for r in gt])
    gt_p = np.array([r.p for r in gt]).reshape(-1, 3)
    est_t = np.array([r.t for r in est])
    est_p = np.array([r.p for r in est]).reshape(-1, 3)
    if len(gt_t) < 2 or len(est_t) == 0:
        raise InsufficientOverlap(f"{len(est_t)} estimates against {len(gt_t)} ground-truth records")
    inside = (est_t >= gt_t[0]) & (est_t <= gt_t[-1])
    if np.count_nonzero(inside) < MIN_OVERLAP:
        raise InsufficientOverlap(f"only {np.count_nonzero(inside)} estimates overlap the ground truth")
    t = est_t[inside]
    truth = np.column_stack([np.interp(t, gt_t, gt_p[:, k]) for k in range(3)])
    return est_p[inside], truth


def rmse_ate(est: Sequence[TrajectoryRecord], gt: Sequence[TrajectoryRecord]) -> float:
    """Absolute trajectory RMSE in centimeters after SE(3) alignment of the estimate."""
    est_p, gt_p = associate(est, gt)
    R, t = umeyama_alignment(est_p, gt_p)
    err = gt_p - (est_p @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))) * 100.0)
