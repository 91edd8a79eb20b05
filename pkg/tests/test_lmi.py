import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbitprivacy.lmi import (
    Affine,
    LmiProblem,
    MatrixVar,
    block,
    certify,
    hua_identity,
    psd_residual,
    schur_lemma_check,
    schur_tests,
    solve,
    sym_block,
)


def _spd(rng, n, cond=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.geomspace(1.0, cond, n)) @ q.T


# --- canonical form --------------------------------------------------------

def test_matrix_var_structures():
    assert MatrixVar("S", 3, "diagonal").free_entries() == [(0, 0), (1, 1), (2, 2)]
    assert len(MatrixVar("S", 3, "symmetric").free_entries()) == 6
    assert MatrixVar("K", 2, "full", 4).shape == (2, 4)
    assert MatrixVar("g", 1, "scalar").shape == (1, 1)
    with pytest.raises(ValueError):
        MatrixVar("bad", 0)
    with pytest.raises(ValueError):
        MatrixVar("bad", 2, "scalar")


def test_affine_evaluate_matches_numpy():
    rng = np.random.default_rng(0)
    p = LmiProblem()
    S = p.var("S", 3)
    K = p.var("K", 2, "full", 3)
    L, R, A = rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
    expr = L @ S.expr @ R + A - (K.expr @ R) * 2.0
    sv = _spd(rng, 3)
    kv = rng.standard_normal((2, 3))
    vals = {"S": sv, "K": kv}
    np.testing.assert_allclose(expr.evaluate(vals), L @ sv @ R + A - 2.0 * kv @ R, atol=1e-12)
    np.testing.assert_allclose(expr.T.evaluate(vals), (L @ sv @ R + A - 2.0 * kv @ R).T, atol=1e-12)
    assert expr.trace().evaluate(vals)[0, 0] == pytest.approx(np.trace(L @ sv @ R + A - 2.0 * kv @ R))


def test_sym_block_assembly():
    p = LmiProblem()
    S = p.var("S", 2)
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    blk = sym_block([[S.expr, B], [None, np.eye(2)]])
    sv = np.array([[5.0, 1.0], [1.0, 6.0]])
    np.testing.assert_array_equal(blk.evaluate({"S": sv}), np.block([[sv, B], [B.T, np.eye(2)]]))
    full = block([[S.expr, B]])
    assert full.shape == (2, 4)


def test_undeclared_variable_rejected():
    p, q = LmiProblem(), LmiProblem()
    S = q.var("S", 1)
    with pytest.raises(ValueError):
        p.add_psd(S.expr)


def test_dump_triplets():
    p = LmiProblem()
    t = p.var("t", 1, "scalar")
    p.add_psd(sym_block([[t.expr, 1.0], [None, t.expr]]), "lmi")
    p.set_objective(t.expr, "min")
    buf = io.StringIO()
    p.dump(buf)
    lines = [ln.split() for ln in buf.getvalue().splitlines() if not ln.startswith("#")]
    assert ["lmi", "_const[0,0]", "0", "1", "1"] in lines
    assert ["lmi", "t[0,0]", "0", "0", "1"] in lines
    assert ["lmi", "t[0,0]", "1", "1", "1"] in lines
    assert all(len(ln) == 5 for ln in lines)


# --- solve -----------------------------------------------------------------

def test_trace_minimum_at_zero():
    p = LmiProblem()
    S = p.var("S", 1)
    p.add_psd(S.expr)
    p.set_objective(S.expr.trace(), "min")
    sol = solve(p)
    assert sol.optimal
    assert sol.values["S"][0, 0] == pytest.approx(0.0, abs=1e-7)
    assert sol.objective_value == pytest.approx(0.0, abs=1e-7)


def test_two_by_two_lmi():
    p = LmiProblem()
    t = p.var("t", 1, "scalar")
    p.add_psd(sym_block([[t.expr, 1.0], [None, t.expr]]))
    p.set_objective(t.expr, "min")
    sol = solve(p)
    assert sol.optimal
    assert sol.objective_value == pytest.approx(1.0, abs=1e-6)


def test_infeasible_detected():
    p = LmiProblem()
    S = p.var("S", 2)
    p.add_psd(S.expr)
    p.add_psd(S.expr * -1.0 - np.eye(2))
    p.set_objective(S.expr.trace(), "min")
    assert solve(p).status == "infeasible"


def test_equality_constraints():
    p = LmiProblem()
    S = p.var("S", 2, "diagonal")
    p.add_psd(S.expr)
    p.add_eq(S.expr.entry(0, 0) + S.expr.entry(1, 1) - 3.0)
    p.set_objective(S.expr.entry(0, 0) * 2.0 + S.expr.entry(1, 1), "min")
    sol = solve(p)
    assert sol.optimal
    np.testing.assert_allclose(sol.values["S"], [0.0, 3.0], atol=1e-6)


@pytest.mark.parametrize("solver", ["CLARABEL", "CVXOPT"])
def test_round_trip_certificate(solver):
    rng = np.random.default_rng(3)
    A = _spd(rng, 4)
    p = LmiProblem()
    X = p.var("X", 4)
    # maximize trace X subject to [A - X, I; I, I] >= 0 i.e. X <= A - I-ish
    p.add_psd(sym_block([[A + np.eye(4) * 2.0 - X.expr, np.eye(4)], [None, np.eye(4)]]))
    p.set_objective(X.expr.trace(), "max")
    sol = solve(p, solvers=(solver,))
    assert sol.optimal
    for cid, expr in p.psd_constraints:
        lo, slack = psd_residual(expr, sol.values)
        assert lo >= -slack
    assert certify(p, sol.values)["ok"]
    recomputed = float(np.trace(sol.values["X"]))
    assert recomputed == pytest.approx(sol.objective_value, rel=1e-8)
    assert sol.objective_value == pytest.approx(np.trace(A + np.eye(4)), rel=1e-6)
    assert sol.solver_stats["duality_gap"] <= 1e-8 * (1.0 + abs(sol.objective_value)) * 10


def test_problem_reusable_and_reentrant():
    p = LmiProblem()
    t = p.var("t", 1, "scalar")
    p.add_psd(sym_block([[t.expr, 2.0], [None, t.expr]]))
    p.set_objective(t.expr, "min")
    a, b = solve(p), solve(p)
    assert a.objective_value == pytest.approx(b.objective_value, abs=1e-10)


# --- Schur and Hua oracles -------------------------------------------------

def test_schur_examples():
    assert schur_tests(2.0, 1.0, 1.0) == (True, True)
    assert schur_tests(0.5, 1.0, 1.0) == (False, False)
    assert schur_lemma_check(2.0, 1.0, 1.0) and schur_lemma_check(0.5, 1.0, 1.0)
    A = np.diag([1.0, -1.0])
    assert schur_tests(A, np.zeros((2, 2)), np.eye(2)) == (False, False)
    assert schur_tests(np.eye(2), np.zeros((2, 2)), np.eye(2)) == (True, True)


def test_hua_examples():
    lhs, rhs = hua_identity(1.0, 1.0)
    assert lhs[0, 0] == pytest.approx(0.5) and rhs[0, 0] == pytest.approx(0.5)
    lhs, rhs = hua_identity(2 * np.eye(2), np.diag([1.0, 3.0]))
    assert np.abs(lhs - rhs).max() <= 1e-12
    rng = np.random.default_rng(5)
    lhs, rhs = hua_identity(_spd(rng, 5), _spd(rng, 5))
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(lhs)


def test_hua_rejects_singular():
    with pytest.raises(np.linalg.LinAlgError):
        hua_identity(np.zeros((2, 2)), np.eye(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.floats(0.0, 2.0))
def test_hua_property_well_conditioned(seed, n, log_cond):
    rng = np.random.default_rng(seed)
    Z, R = _spd(rng, n, 10**log_cond), _spd(rng, n, 10**log_cond)
    lhs, rhs = hua_identity(Z, R)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(lhs)


def test_hua_property_condition_up_to_1e8():
    # The right-hand side subtracts two inverses of size ~|Z^-1|, so its
    # roundoff grows like eps * cond^2; this bound is not reachable in double
    # precision near cond 1e8 and is expected to fail there.
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = 2 + seed % 5
        cond = 10 ** rng.uniform(0.0, 8.0)
        lhs, rhs = hua_identity(_spd(rng, n, cond), _spd(rng, n, cond))
        worst = max(worst, np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs))
    assert worst <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4), st.floats(-2.0, 2.0))
def test_schur_property(seed, n, m, shift):
    rng = np.random.default_rng(seed)
    C = _spd(rng, m, 10.0)
    B = rng.standard_normal((n, m))
    A = B @ np.linalg.solve(C, B.T) + shift * np.eye(n)
    assert schur_lemma_check(A, B, C)
