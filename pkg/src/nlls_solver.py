"""
Sparse normal-equation assembly, Levenberg-Marquardt on the window manifold and
Schur-complement marginalization.

Factors only have to provide `linearize(values) -> Linearization`. A linearization holds
N stacked residual rows of equal dimension, so one factor object may stand for a whole
batch of visual observations. Variables missing from the layout are held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from config import SolverConfig
from enums import FactorKind, VariableKind
from errors import SingularBlock, SolverDiverged
from manifold_state import ERROR_DIM, ROT, ImuKeyState, boxminus, boxplus, right_jacobian_inv
from visual_factors import huber_weights

VARIABLE_DIMS = {
    VariableKind.KEYSTATE: ERROR_DIM,
    VariableKind.FEATURE_XYZ: 3,
    VariableKind.INV_DEPTH: 1,
    VariableKind.TD: 1,
}
ELIMINATED_KINDS = (VariableKind.FEATURE_XYZ, VariableKind.INV_DEPTH)

MARGINAL_JITTER = 1e-10
MAX_BLOCK_CONDITION = 1e14
EIGEN_FLOOR = 1e-10
DIAG_FLOOR = 1e-9


@dataclass
class VariableLayout:
    """Column layout of the window's error-state vector."""

    keys: list[str] = field(default_factory=list)
    kinds: dict[str, VariableKind] = field(default_factory=dict)
    offsets: dict[str, int] = field(default_factory=dict)
    size: int = 0

    def add(self, key: str, kind: VariableKind) -> None:
        if key in self.offsets:
            raise ValueError(f"variable {key} already in layout")
        if kind == VariableKind.TD and any(k == VariableKind.TD for k in self.kinds.values()):
            raise ValueError("the time offset may appear only once in a layout")
        self.keys.append(key)
        self.kinds[key] = kind
        self.offsets[key] = self.size
        self.size += VARIABLE_DIMS[kind]

    @classmethod
    def from_variables(cls, variables: Iterable[tuple[str, VariableKind]]) -> VariableLayout:
        """Orders variables as key states, features, then td."""
        variables = list(variables)
        layout = cls()
        rank = {VariableKind.KEYSTATE: 0, VariableKind.FEATURE_XYZ: 1, VariableKind.INV_DEPTH: 1, VariableKind.TD: 2}
        for key, kind in sorted(variables, key=lambda kv: rank[kv[1]]):
            layout.add(key, kind)
        return layout

    def dim(self, key: str) -> int:
        return VARIABLE_DIMS[self.kinds[key]]

    def offset_array(self, keys: Sequence[str]) -> np.ndarray:
        return np.array([self.offsets.get(k, -1) for k in keys], dtype=np.int64)

    def columns(self, keys: Iterable[str]) -> np.ndarray:
        return np.concatenate(
            [np.arange(self.offsets[k], self.offsets[k] + self.dim(k)) for k in keys] or [np.zeros(0, dtype=int)]
        )

    def eliminated_columns(self) -> np.ndarray:
        return self.columns(k for k in self.keys if self.kinds[k] in ELIMINATED_KINDS)


@dataclass(frozen=True, eq=False)
class JacobianBlock:
    """Jacobian of N residual rows w.r.t. one variable per row, chosen by `index` into `keys`."""

    keys: Sequence[str]
    index: np.ndarray
    jac: np.ndarray


@dataclass(frozen=True, eq=False)
class Linearization:
    kind: FactorKind
    residuals: np.ndarray
    blocks: list[JacobianBlock]
    valid: np.ndarray
    robust_threshold: float | None = None


class Factor(Protocol):
    kind: FactorKind

    def variables(self) -> set[str]: ...

    def linearize(self, values: dict[str, Any], with_jacobians: bool = True) -> Linearization: ...


def retract(values: dict[str, Any], layout: VariableLayout, dx: np.ndarray) -> dict[str, Any]:
    out = dict(values)
    for key in layout.keys:
        o = layout.offsets[key]
        step = dx[o : o + layout.dim(key)]
        kind = layout.kinds[key]
        if kind == VariableKind.KEYSTATE:
            out[key] = boxplus(values[key], step)
        elif kind == VariableKind.FEATURE_XYZ:
            out[key] = np.asarray(values[key], dtype=float) + step
        else:
            out[key] = float(values[key]) + float(step[0])
    return out


def local_difference(a: Any, b: Any) -> np.ndarray:
    """a ⊟ b for any variable kind."""
    if isinstance(a, ImuKeyState):
        return boxminus(a, b).as_vector()
    return np.atleast_1d(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


@dataclass(frozen=True, eq=False)
class MarginalPrior:
    """Prior r_p + J_p (x ⊟ x_lin) over the retained variables `keys` (in column order)."""

    r_p: np.ndarray
    J_p: np.ndarray
    keys: list[str] = field(default_factory=list)
    kinds: dict[str, VariableKind] = field(default_factory=dict)
    linearization_point: dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.J_p.shape[0]

    def with_linearization_point(
        self, keys: list[str], kinds: dict[str, VariableKind], values: dict[str, Any]
    ) -> MarginalPrior:
        return MarginalPrior(self.r_p, self.J_p, list(keys), dict(kinds), {k: values[k] for k in keys})


class PriorFactor:
    kind = FactorKind.PRIOR

    def __init__(self, prior: MarginalPrior):
        self.prior = prior
        dims = [VARIABLE_DIMS[prior.kinds[k]] for k in prior.keys]
        self._slices = dict(zip(prior.keys, np.split(np.arange(sum(dims)), np.cumsum(dims)[:-1])))

    def variables(self) -> set[str]:
        return set(self.prior.keys)

    def linearize(self, values: dict[str, Any], with_jacobians: bool = True) -> Linearization:
        p = self.prior
        dx = np.concatenate([local_difference(values[k], p.linearization_point[k]) for k in p.keys])
        r = p.r_p + p.J_p @ dx
        blocks = []
        if with_jacobians:
            for key in p.keys:
                J = p.J_p[:, self._slices[key]]
                if p.kinds[key] == VariableKind.KEYSTATE:
                    J = J.copy()
                    J[:, ROT] = J[:, ROT] @ right_jacobian_inv(dx[self._slices[key]][ROT])
                blocks.append(JacobianBlock([key], np.zeros(1, dtype=int), J[None]))
        return Linearization(self.kind, r[None], blocks, np.ones(1, dtype=bool))


def diagonal_prior(
    sigmas: dict[str, np.ndarray], kinds: dict[str, VariableKind], values: dict[str, Any]
) -> MarginalPrior:
    """Independent Gaussian prior centred on `values` with the given per-component sigmas."""
    keys = list(sigmas)
    inv = np.concatenate([1.0 / np.atleast_1d(np.asarray(sigmas[k], dtype=float)) for k in keys])
    return MarginalPrior(np.zeros(len(inv)), np.diag(inv), keys, dict(kinds), {k: values[k] for k in keys})


@dataclass
class NormalEquations:
    H: sparse.csr_matrix
    b: np.ndarray
    cost: float
    dropped: int = 0
    linearizations: list[Linearization] = field(default_factory=list)


def _weighted(lin: Linearization) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    mask = lin.valid
    r = lin.residuals[mask]
    if lin.robust_threshold is not None and len(r):
        sqrt_w, rho = huber_weights(r, lin.robust_threshold)
        return mask, r * sqrt_w[:, None], sqrt_w, 0.5 * float(rho.sum())
    return mask, r, np.ones(len(r)), 0.5 * float(np.sum(r**2))


def cost_of(linearizations: Iterable[Linearization]) -> tuple[float, int]:
    cost = 0.0
    dropped = 0
    for lin in linearizations:
        _, _, _, c = _weighted(lin)
        cost += c
        dropped += int(np.count_nonzero(~lin.valid))
    return cost, dropped


def build_normal_equations(
    factors: Iterable[Factor],
    layout: VariableLayout,
    values: dict[str, Any],
    linearizations: list[Linearization] | None = None,
) -> NormalEquations:
    """
    Assembles H = sum J^T J and b = -sum J^T r over whitened, robustly weighted factors.

    Rows flagged invalid by a factor (behind camera, degenerate depth, offset out of range)
    are dropped and counted.
    """
    if linearizations is None:
        linearizations = [f.linearize(values) for f in factors]
    n = layout.size
    rows, cols, data = [], [], []
    b = np.zeros(n)
    cost = 0.0
    dropped = 0
    for lin in linearizations:
        mask, r, sqrt_w, c = _weighted(lin)
        cost += c
        dropped += int(np.count_nonzero(~mask))
        if not len(r):
            continue
        prepared = []
        for block in lin.blocks:
            offs = layout.offset_array(block.keys)[block.index[mask]]
            present = offs >= 0
            if not present.any():
                continue
            J = block.jac[mask] * sqrt_w[:, None, None]
            k = J.shape[2]
            prepared.append((offs, present, J, k))
            g = -np.einsum("nd,ndk->nk", r, J)
            np.add.at(b, offs[present, None] + np.arange(k), g[present])
        for offs_a, pres_a, Ja, ka in prepared:
            for offs_b, pres_b, Jb, kb in prepared:
                both = pres_a & pres_b
                if not both.any():
                    continue
                blk = np.einsum("ndk,ndl->nkl", Ja[both], Jb[both])
                ri = offs_a[both][:, None, None] + np.arange(ka)[None, :, None]
                ci = offs_b[both][:, None, None] + np.arange(kb)[None, None, :]
                rows.append(np.broadcast_to(ri, blk.shape).ravel())
                cols.append(np.broadcast_to(ci, blk.shape).ravel())
                data.append(blk.ravel())
    if data:
        H = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
    else:
        H = sparse.csr_matrix((n, n))
    H = ((H + H.T) * 0.5).tocsr()
    return NormalEquations(H=H, b=b, cost=cost, dropped=dropped, linearizations=linearizations)


def _feature_blocks(sizes: np.ndarray) -> list[np.ndarray]:
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return [np.arange(s, s + k) for s, k in zip(starts, sizes)]


def solve_normal_equations(
    H: sparse.spmatrix, b: np.ndarray, layout: VariableLayout, damping: float = 0.0
) -> np.ndarray:
    """
    Solves (H + damping * diag(H)) dx = b.

    Feature columns are eliminated first by Schur complement when their block of H is
    block-diagonal; otherwise the full system is solved directly.

    Raises:
        LinAlgError: When the (reduced) system is not positive definite.
    """
    H = sparse.csr_matrix(H, dtype=float)
    diag = H.diagonal()
    if damping > 0:
        H = H + sparse.diags(damping * np.maximum(diag, DIAG_FLOOR))
    f_cols = layout.eliminated_columns()
    if not len(f_cols):
        return cho_solve(cho_factor(H.toarray()), b)

    p_cols = np.setdiff1d(np.arange(layout.size), f_cols)
    H_ff = H[f_cols][:, f_cols].tocsr()
    sizes = np.array([layout.dim(k) for k in layout.keys if layout.kinds[k] in ELIMINATED_KINDS])
    blocks = _feature_blocks(sizes)
    block_mask = sparse.block_diag([np.ones((len(idx), len(idx))) for idx in blocks], format="csr")
    if (H_ff - H_ff.multiply(block_mask)).count_nonzero() > 0:
        return cho_solve(cho_factor(H.toarray()), b)

    H_ff_inv = _invert_feature_blocks(H_ff, sizes)
    H_pf = H[p_cols][:, f_cols]
    H_pp = H[p_cols][:, p_cols].toarray()
    b_p, b_f = b[p_cols], b[f_cols]
    W = H_pf @ H_ff_inv
    S = H_pp - (W @ H_pf.T).toarray()
    rhs = b_p - W @ b_f
    dx = np.zeros(layout.size)
    if len(p_cols):
        dx[p_cols] = cho_solve(cho_factor(0.5 * (S + S.T)), rhs)
    dx[f_cols] = H_ff_inv @ (b_f - H_pf.T @ dx[p_cols])
    return dx


def _invert_feature_blocks(H_ff: sparse.csr_matrix, sizes: np.ndarray) -> sparse.csr_matrix:
    dense_diag = H_ff.diagonal()
    if np.all(sizes == 1):
        if np.any(dense_diag <= 0):
            raise LinAlgError("feature block not positive definite")
        return sparse.diags(1.0 / dense_diag).tocsr()
    inverses = []
    start = 0
    for k in sizes:
        blk = H_ff[start : start + k, start : start + k].toarray()
        inverses.append(np.linalg.inv(blk))
        start += k
    return sparse.block_diag(inverses, format="csr")


@dataclass
class LmIteration:
    iteration: int
    cost: float
    lam: float
    accepted: bool


@dataclass
class LmReport:
    iterations: int = 0
    accepted: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    dropped: int = 0
    status: str = "max_iters"
    trace: list[LmIteration] = field(default_factory=list)


@dataclass
class WindowProblem:
    layout: VariableLayout
    values: dict[str, Any]
    factors: list[Factor]


def _linearize_all(factors: Sequence[Factor], values: dict[str, Any]) -> list[Linearization]:
    return [f.linearize(values) for f in factors]


def lm_solve(problem: WindowProblem, config: SolverConfig | None = None) -> tuple[dict[str, Any], LmReport]:
    """
    Levenberg-Marquardt with multiplicative diagonal damping and boxplus updates.

    A step is accepted only if it lowers the cost without dropping more factor rows than
    the current point does.

    Raises:
        SolverDiverged: When damping exceeds lambda_max before any step was accepted.
    """
    config = config or SolverConfig()
    layout, factors = problem.layout, problem.factors
    values = problem.values
    lins = _linearize_all(factors, values)
    ne = build_normal_equations(factors, layout, values, lins)
    report = LmReport(initial_cost=ne.cost, final_cost=ne.cost, dropped=ne.dropped)
    lam = config.lambda_init

    for it in range(1, config.max_iters + 1):
        if layout.size == 0 or np.max(np.abs(ne.b), initial=0.0) < config.grad_tol:
            report.status = "converged_gradient"
            break
        report.iterations = it
        accepted = False
        while not accepted:
            try:
                dx = solve_normal_equations(ne.H, ne.b, layout, lam)
            except (LinAlgError, ValueError):
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                predicted = 0.5 * float(dx @ ne.b + lam * dx @ (np.maximum(ne.H.diagonal(), DIAG_FLOOR) * dx))
                if predicted <= config.cost_tol * ne.cost + 1e-18:
                    report.status = "converged_step"
                    break
                candidate = retract(values, layout, dx)
                cand_lins = _linearize_all(factors, candidate)
                cand_cost, cand_dropped = cost_of(cand_lins)
                if cand_cost < ne.cost and cand_dropped <= ne.dropped:
                    accepted = True
                    report.trace.append(LmIteration(it, cand_cost, lam, True))
                    logging.debug("LM iter %d: cost %.6g -> %.6g, lambda %.1e", it, ne.cost, cand_cost, lam)
                    break
                report.trace.append(LmIteration(it, cand_cost, lam, False))
            lam *= 10.0
            if lam > config.lambda_max:
                if report.accepted == 0:
                    raise SolverDiverged(f"damping exceeded {config.lambda_max:g} without an accepted step")
                report.status = "stalled"
                break
        if not accepted:
            break
        previous_cost = ne.cost
        values = candidate
        ne = build_normal_equations(factors, layout, values, cand_lins)
        report.accepted += 1
        lam = max(lam * 0.3, 1e-12)
        if previous_cost - ne.cost <= config.cost_tol * previous_cost:
            report.status = "converged_cost"
            break

    report.final_cost = ne.cost
    report.dropped = ne.dropped
    return values, report


def marginalize(H: np.ndarray | sparse.spmatrix, b: np.ndarray, drop_indices: Sequence[int]) -> MarginalPrior:
    """
    Schur-complements the `drop_indices` columns out of (H, b) and factors the reduced
    system as J_p^T J_p with negative eigenvalues clamped to zero.

    The returned prior has no keys attached; callers add the linearization point.

    Raises:
        SingularBlock: When the equilibrated drop block stays singular after jitter.
    """
    H = H.toarray() if sparse.issparse(H) else np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    drop = np.asarray(sorted(drop_indices), dtype=int)
    keep = np.setdiff1d(np.arange(H.shape[0]), drop)

    H_dd = H[np.ix_(drop, drop)]
    H_rd = H[np.ix_(keep, drop)]
    if len(drop):
        scale = 1.0 / np.sqrt(np.maximum(np.diag(H_dd), MARGINAL_JITTER))
        H_dd_eq = scale[:, None] * H_dd * scale[None, :] + MARGINAL_JITTER * np.eye(len(drop))
        w, V = eigh(0.5 * (H_dd_eq + H_dd_eq.T))
        if w.min() <= 0 or w.max() / w.min() > MAX_BLOCK_CONDITION:
            raise SingularBlock(f"marginalized block is singular (eigenvalues {w.min():.3g}..{w.max():.3g})")
        H_dd_inv = scale[:, None] * (V / w) @ V.T * scale[None, :]
        H_r = H[np.ix_(keep, keep)] - H_rd @ H_dd_inv @ H_rd.T
        b_r = b[keep] - H_rd @ H_dd_inv @ b[drop]
    else:
        H_r = H[np.ix_(keep, keep)]
        b_r = b[keep]

    s, U = eigh(0.5 * (H_r + H_r.T))
    positive = s > EIGEN_FLOOR * max(1.0, s.max(initial=0.0))
    s, U = s[positive], U[:, positive]
    J_p = np.sqrt(s)[:, None] * U.T
    r_p = -(U.T @ b_r) / np.sqrt(s)
    return MarginalPrior(r_p=r_p, J_p=J_p)
