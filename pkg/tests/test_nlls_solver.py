import numpy as np
import pytest
from numpy.testing import assert_allclose

from config import SolverConfig
from enums import FactorKind, VariableKind
from errors import SingularBlock, SolverDiverged
from nlls_solver import (
    JacobianBlock,
    Linearization,
    PriorFactor,
    VariableLayout,
    WindowProblem,
    build_normal_equations,
    diagonal_prior,
    lm_solve,
    marginalize,
    solve_normal_equations,
)

TD = VariableKind.TD
XYZ = VariableKind.FEATURE_XYZ
INV = VariableKind.INV_DEPTH


class LinearFactor:
    """r = sum_k A_k x_k - c, optionally with a Huber threshold or invalid rows."""

    kind = FactorKind.PRIOR

    def __init__(self, blocks: dict, c, robust_threshold=None, valid=True):
        self.blocks = {k: np.atleast_2d(np.asarray(A, dtype=float)) for k, A in blocks.items()}
        self.c = np.atleast_1d(np.asarray(c, dtype=float))
        self.robust_threshold = robust_threshold
        self.valid = valid

    def variables(self):
        return set(self.blocks)

    def linearize(self, values, with_jacobians=True):
        r = sum(A @ np.atleast_1d(values[k]) for k, A in self.blocks.items()) - self.c
        blocks = []
        if with_jacobians:
            blocks = [JacobianBlock([k], np.zeros(1, dtype=int), A[None]) for k, A in self.blocks.items()]
        return Linearization(self.kind, r[None], blocks, np.array([self.valid]), self.robust_threshold)


class SquareFactor:
    """r = x^2 - target on a scalar; `flip` reports the Jacobian with the wrong sign."""

    kind = FactorKind.PRIOR

    def __init__(self, target: float, flip: bool = False):
        self.target = target
        self.sign = -1.0 if flip else 1.0

    def variables(self):
        return {"td"}

    def linearize(self, values, with_jacobians=True):
        x = float(values["td"])
        blocks = [JacobianBlock(["td"], np.zeros(1, dtype=int), np.array([[[self.sign * 2.0 * x]]]))]
        residual = np.array([[x * x - self.target]])
        return Linearization(self.kind, residual, blocks if with_jacobians else [], np.ones(1, dtype=bool))


def test_empty_problem_has_zero_system():
    layout = VariableLayout.from_variables([("td", TD)])
    ne = build_normal_equations([], layout, {"td": 0.0})
    assert ne.H.toarray().tolist() == [[0.0]]
    assert ne.b.tolist() == [0.0]
    assert ne.cost == 0.0


def test_single_linear_factor():
    layout = VariableLayout.from_variables([("td", TD)])
    ne = build_normal_equations([LinearFactor({"td": [[1.0]]}, [3.0])], layout, {"td": 0.0})
    assert_allclose(ne.H.toarray(), [[1.0]])
    assert_allclose(ne.b, [3.0])
    assert ne.cost == pytest.approx(4.5)


def test_layout_orders_and_validates():
    layout = VariableLayout.from_variables([("td", TD), ("f1", XYZ), ("l2", INV)])
    assert layout.keys == ["f1", "l2", "td"]
    assert layout.size == 5
    assert layout.eliminated_columns().tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        layout.add("td2", TD)
    with pytest.raises(ValueError):
        layout.add("f1", XYZ)


def _random_problem(rng, n_features=4, n_factors=12):
    keys = [f"f{i}" for i in range(n_features)]
    layout = VariableLayout.from_variables([(k, XYZ) for k in keys] + [("td", TD)])
    values = {k: rng.normal(0.0, 1.0, 3) for k in keys}
    values["td"] = 0.01
    factors = []
    for _ in range(n_factors):
        chosen = rng.choice(keys, size=2, replace=False)
        blocks = {k: rng.normal(0.0, 1.0, (2, 3)) for k in chosen}
        blocks["td"] = rng.normal(0.0, 1.0, (2, 1))
        factors.append(LinearFactor(blocks, rng.normal(0.0, 1.0, 2)))
    return layout, values, factors


def _dense_system(layout, values, factors):
    J_rows, r_rows = [], []
    for f in factors:
        r = sum(A @ np.atleast_1d(values[k]) for k, A in f.blocks.items()) - f.c
        J = np.zeros((len(r), layout.size))
        for k, A in f.blocks.items():
            J[:, layout.columns([k])] = A
        J_rows.append(J)
        r_rows.append(r)
    J, r = np.vstack(J_rows), np.concatenate(r_rows)
    return J.T @ J, -J.T @ r, 0.5 * float(r @ r)


def test_normal_equations_match_dense_assembly(rng):
    layout, values, factors = _random_problem(rng)
    ne = build_normal_equations(factors, layout, values)
    H, b, cost = _dense_system(layout, values, factors)
    assert_allclose(ne.H.toarray(), H, atol=1e-12)
    assert_allclose(ne.b, b, atol=1e-12)
    assert ne.cost == pytest.approx(cost)


def test_variables_outside_layout_are_held_fixed(rng):
    layout = VariableLayout.from_variables([("f0", XYZ)])
    factor = LinearFactor({"f0": np.eye(3), "td": [[1.0], [2.0], [3.0]]}, [1.0, 2.0, 3.0])
    values, _ = lm_solve(WindowProblem(layout, {"f0": np.zeros(3), "td": 0.5}, [factor]))
    assert values["td"] == 0.5
    assert_allclose(values["f0"], [0.5, 1.0, 1.5], atol=1e-6)


def test_robust_and_invalid_rows():
    layout = VariableLayout.from_variables([("f0", XYZ)])
    values = {"f0": np.zeros(3)}
    huber = LinearFactor({"f0": np.eye(3)[:2]}, [3.0, 4.0], robust_threshold=1.0)
    ne = build_normal_equations([huber], layout, values)
    assert ne.cost == pytest.approx(0.5 * (2.0 * 5.0 - 1.0))
    invalid = LinearFactor({"f0": np.eye(3)[:2]}, [3.0, 4.0], valid=False)
    ne = build_normal_equations([invalid], layout, values)
    assert ne.dropped == 1
    assert ne.cost == 0.0
    assert not ne.H.toarray().any()


def test_schur_solve_matches_dense(rng):
    keys = [f"l{i}" for i in range(6)]
    layout = VariableLayout.from_variables([(k, INV) for k in keys] + [("td", TD)])
    values = {k: 0.0 for k in keys} | {"td": 0.0}
    factors = [
        LinearFactor({k: [[rng.normal()]], "td": [[rng.normal()]]}, [rng.normal()]) for k in keys for _ in range(2)
    ]
    factors.append(LinearFactor({"td": [[1.0]]}, [0.0]))
    ne = build_normal_equations(factors, layout, values)
    dense = np.linalg.solve(ne.H.toarray(), ne.b)
    assert_allclose(solve_normal_equations(ne.H, ne.b, layout), dense, atol=1e-9)


def test_coupled_features_fall_back_to_dense_solve(rng):
    layout, values, factors = _random_problem(rng, n_factors=20)
    ne = build_normal_equations(factors, layout, values)
    dense = np.linalg.solve(ne.H.toarray(), ne.b)
    assert_allclose(solve_normal_equations(ne.H, ne.b, layout), dense, atol=1e-8)


def test_lm_quadratic_bowl():
    layout = VariableLayout.from_variables([("td", TD)])
    values, report = lm_solve(WindowProblem(layout, {"td": 0.0}, [LinearFactor({"td": [[1.0]]}, [3.0])]))
    assert values["td"] == pytest.approx(3.0, abs=1e-6)
    assert 1 <= report.accepted <= 2


def test_lm_zero_residual_start_takes_no_step():
    layout = VariableLayout.from_variables([("td", TD)])
    values, report = lm_solve(WindowProblem(layout, {"td": 3.0}, [LinearFactor({"td": [[1.0]]}, [3.0])]))
    assert values["td"] == 3.0
    assert report.accepted == 0
    assert report.status == "converged_gradient"


def test_lm_nonlinear_costs_decrease():
    layout = VariableLayout.from_variables([("td", TD)])
    values, report = lm_solve(WindowProblem(layout, {"td": 1.0}, [SquareFactor(2.0)]), SolverConfig(max_iters=50))
    assert values["td"] == pytest.approx(np.sqrt(2.0), abs=1e-6)
    accepted = [report.initial_cost] + [it.cost for it in report.trace if it.accepted]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    assert report.final_cost <= report.initial_cost


def test_lm_raises_when_no_step_helps():
    layout = VariableLayout.from_variables([("td", TD)])
    problem = WindowProblem(layout, {"td": 1.0}, [SquareFactor(2.0, flip=True)])
    with pytest.raises(SolverDiverged):
        lm_solve(problem, SolverConfig(cost_tol=0.0))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)


def test_marginalize_two_by_two():
    prior = marginalize(np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([1.0, 1.0]), [0])
    assert_allclose(prior.J_p.T @ prior.J_p, [[1.5]])
    assert_allclose(-prior.J_p.T @ prior.r_p, [0.5])


def test_marginalize_block_diagonal_keeps_retained_block(rng):
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(2, 2))
    H = np.zeros((5, 5))
    H[:3, :3] = A @ A.T + np.eye(3)
    H[3:, 3:] = B @ B.T + np.eye(2)
    b = rng.normal(size=5)
    prior = marginalize(H, b, [0, 1, 2])
    assert_allclose(prior.J_p.T @ prior.J_p, H[3:, 3:], atol=1e-10)
    assert_allclose(-prior.J_p.T @ prior.r_p, b[3:], atol=1e-10)


def test_marginalize_rejects_indefinite_block():
    H = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(SingularBlock):
        marginalize(H, np.zeros(3), [0, 1])


def test_marginalized_prior_reproduces_batch_solution(rng):
    keys = [f"f{i}" for i in range(4)]
    kinds = {k: XYZ for k in keys}
    zeros = {k: np.zeros(3) for k in keys}
    first = [LinearFactor({"f0": np.eye(3)}, rng.normal(size=3))]
    first += [LinearFactor({"f0": rng.normal(size=(3, 3)), "f1": rng.normal(size=(3, 3))}, rng.normal(size=3))]
    rest = [
        LinearFactor({a: rng.normal(size=(3, 3)), b: rng.normal(size=(3, 3))}, rng.normal(size=3))
        for a, b in zip(keys[1:], keys[2:])
    ]
    rest += [LinearFactor({k: np.eye(3)}, rng.normal(size=3)) for k in keys[1:]]

    full = VariableLayout.from_variables([(k, XYZ) for k in keys])
    ne = build_normal_equations(first + rest, full, zeros)
    batch = np.linalg.solve(ne.H.toarray(), ne.b)

    local = VariableLayout.from_variables([("f0", XYZ), ("f1", XYZ)])
    ne_local = build_normal_equations(first, local, zeros)
    prior = marginalize(ne_local.H, ne_local.b, local.columns(["f0"]))
    prior_factor = PriorFactor(prior.with_linearization_point(["f1"], kinds, zeros))

    reduced = VariableLayout.from_variables([(k, XYZ) for k in keys[1:]])
    ne_reduced = build_normal_equations([prior_factor] + rest, reduced, zeros)
    solution = np.linalg.solve(ne_reduced.H.toarray(), ne_reduced.b)
    assert_allclose(solution, batch[3:], atol=1e-8)


def test_diagonal_prior_whitens_by_sigma():
    prior = diagonal_prior({"td": np.array([0.1])}, {"td": TD}, {"td": 0.02})
    lin = PriorFactor(prior).linearize({"td": 0.05})
    assert_allclose(lin.residuals, [[0.3]])
    assert_allclose(lin.blocks[0].jac, [[[10.0]]])
