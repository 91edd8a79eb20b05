"""Small canonical form for linear matrix inequality problems.

Decision variables are matrices with a declared structure. Constraints are
affine matrix expressions built from terms ``L @ V @ R`` (or ``L @ V.T @ R``)
plus a constant, assembled into symmetric blocks and required to be PSD or
zero. Problems are handed to an interior-point conic solver through cvxpy and
every reported optimum is re-checked against the original expressions.

Debug dump format (``LmiProblem.dump``): comment lines start with ``#``; each
other line is one nonzero coefficient::

    <constraint-id> <var>[<i>,<j>] <row> <col> <coeff>

where ``var`` is ``_const`` for the constant part and ``(i, j)`` indexes the
free entry of the variable (``i <= j`` for symmetric, ``i == j`` for
diagonal).
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import cvxpy as cp
import numpy as np

Structure = Literal["symmetric", "diagonal", "full", "scalar"]
Status = Literal["optimal", "infeasible", "unbounded", "numerical_failure", "max_iter"]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
PSD_SLACK = 1e-7
EQ_TOL = 1e-7
SOLVERS = ("CLARABEL", "CVXOPT")
# on numerical breakdown a backend is retried with tol * 10, tol * 100
TOL_RELAXATIONS = 2


@dataclass(frozen=True, eq=False)
class MatrixVar:
    name: str
    dim: int
    structure: Structure = "symmetric"
    cols: int | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.structure == "scalar" and self.dim != 1:
            raise ValueError("scalar variables have dim 1")
        if self.structure != "full" and self.cols not in (None, self.dim):
            raise ValueError("only full variables may be rectangular")

    @property
    def shape(self) -> tuple[int, int]:
        if self.structure == "full":
            return (self.dim, self.cols if self.cols is not None else self.dim)
        return (self.dim, self.dim)

    def free_entries(self) -> list[tuple[int, int]]:
        rows, cols = self.shape
        if self.structure in ("diagonal", "scalar"):
            return [(i, i) for i in range(rows)]
        if self.structure == "symmetric":
            return [(i, j) for i in range(rows) for j in range(i, cols)]
        return [(i, j) for i in range(rows) for j in range(cols)]

    def as_matrix(self, value) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if self.structure == "diagonal":
            return np.diag(value.reshape(-1))
        return value.reshape(self.shape)

    @property
    def expr(self) -> Affine:
        rows, cols = self.shape
        return Affine(np.zeros((rows, cols)), [(self, np.eye(rows), np.eye(cols), False)])


Term = tuple  # (MatrixVar, L, R, transposed)


class Affine:
    """Affine matrix expression: const + sum_k L_k V_k^(T?) R_k."""

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, const, terms: Sequence[Term] = ()):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms = list(terms)

    @classmethod
    def constant(cls, value) -> Affine:
        return cls(np.atleast_2d(np.asarray(value, dtype=float)))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> Affine:
        return cls(np.zeros((rows, cols)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @property
    def variables(self) -> list[MatrixVar]:
        seen = {}
        for var, *_ in self.terms:
            seen.setdefault(id(var), var)
        return list(seen.values())

    @staticmethod
    def lift(other) -> Affine:
        if isinstance(other, Affine):
            return other
        if isinstance(other, MatrixVar):
            return other.expr
        return Affine.constant(other)

    def __add__(self, other):
        other = Affine.lift(other)
        if other.shape != self.shape:
            if other.shape == (1, 1) and not other.terms:
                return Affine(self.const + other.const, self.terms)
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        return Affine(self.const + other.const, self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-Affine.lift(other))

    def __rsub__(self, other):
        return Affine.lift(other) - self

    def __mul__(self, scalar):
        s = float(scalar)
        return Affine(self.const * s, [(v, L * s, R, t) for v, L, R, t in self.terms])

    __rmul__ = __mul__

    def __rmatmul__(self, left):
        left = np.atleast_2d(np.asarray(left, dtype=float))
        return Affine(left @ self.const, [(v, left @ L, R, t) for v, L, R, t in self.terms])

    def __matmul__(self, right):
        if isinstance(right, (Affine, MatrixVar)):
            raise TypeError("products of two affine expressions are not affine")
        right = np.atleast_2d(np.asarray(right, dtype=float))
        return Affine(self.const @ right, [(v, L, R @ right, t) for v, L, R, t in self.terms])

    @property
    def T(self) -> Affine:
        return Affine(self.const.T, [(v, R.T, L.T, not t) for v, L, R, t in self.terms])

    def trace(self) -> Affine:
        n = min(self.shape)
        terms = []
        for v, L, R, t in self.terms:
            for k in range(n):
                terms.append((v, L[k:k + 1, :], R[:, k:k + 1], t))
        return Affine(np.array([[np.trace(self.const)]]), terms)

    def entry(self, i: int, j: int) -> Affine:
        """The (i, j) entry as a 1x1 expression."""
        ei = np.zeros((1, self.shape[0]))
        ei[0, i] = 1.0
        ej = np.zeros((self.shape[1], 1))
        ej[j, 0] = 1.0
        return ei @ self @ ej

    def support(self) -> np.ndarray:
        """Boolean mask of entries that are not identically zero."""
        mask = self.const != 0.0
        for v, L, R, t in self.terms:
            rows, cols = v.shape
            pattern = np.eye(rows, cols) if v.structure in ("diagonal", "scalar") else np.ones((rows, cols))
            if t:
                pattern = pattern.T
            mask |= (np.abs(L) @ pattern @ np.abs(R)) > 0
        return mask

    def evaluate(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for v, L, R, t in self.terms:
            V = v.as_matrix(values[v.name])
            out += L @ (V.T if t else V) @ R
        return out

    def to_cvxpy(self, cvars: dict):
        out = self.const
        expr = None
        for v, L, R, t in self.terms:
            V = cvars[v.name]
            term = L @ (V.T if t else V) @ R
            expr = term if expr is None else expr + term
        return out if expr is None else expr + out

    def coefficients(self):
        """Yield (var, (a, b), coefficient matrix) for each free variable entry."""
        for v in self.variables:
            rows, cols = v.shape
            coef = np.zeros((rows, cols) + self.shape)
            for w, L, R, t in self.terms:
                if w is not v:
                    continue
                c = np.einsum("ia,bj->abij", L, R)
                coef += c.transpose(1, 0, 2, 3) if t else c
            for a, b in v.free_entries():
                c = coef[a, b] + (coef[b, a] if v.structure == "symmetric" and a != b else 0.0)
                yield v, (a, b), c


def block(grid: Sequence[Sequence]) -> Affine:
    """Assemble a block matrix from affine pieces (None = zero block).

    Block sizes are inferred per block-row and block-column; every row and
    column of the grid needs at least one non-None entry with a known shape.
    """
    nr, nc = len(grid), len(grid[0])
    lifted = [[None if g is None else Affine.lift(g) for g in row] for row in grid]
    heights = [next(g.shape[0] for g in row if g is not None) for row in lifted]
    widths = [next(lifted[i][j].shape[1] for i in range(nr) if lifted[i][j] is not None) for j in range(nc)]
    H, W = sum(heights), sum(widths)
    const = np.zeros((H, W))
    terms = []
    r0 = 0
    for i in range(nr):
        c0 = 0
        for j in range(nc):
            g = lifted[i][j]
            if g is not None:
                if g.shape != (heights[i], widths[j]):
                    raise ValueError(f"block ({i},{j}) has shape {g.shape}, expected {(heights[i], widths[j])}")
                const[r0:r0 + heights[i], c0:c0 + widths[j]] = g.const
                E = np.zeros((H, heights[i]))
                E[r0:r0 + heights[i]] = np.eye(heights[i])
                F = np.zeros((widths[j], W))
                F[:, c0:c0 + widths[j]] = np.eye(widths[j])
                terms.extend((v, E @ L, R @ F, t) for v, L, R, t in g.terms)
            c0 += widths[j]
        r0 += heights[i]
    return Affine(const, terms)


def sym_block(upper: Sequence[Sequence]) -> Affine:
    """Symmetric block matrix from its upper triangle (lower entries are ignored)."""
    n = len(upper)
    grid = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            g = upper[i][j]
            grid[i][j] = g
            if j > i and g is not None:
                grid[j][i] = Affine.lift(g).T
    # pad structurally zero off-diagonal blocks so sizes are inferable
    sizes = [Affine.lift(upper[i][i]).shape[0] for i in range(n)]
    for i in range(n):
        for j in range(n):
            if grid[i][j] is None:
                grid[i][j] = Affine.zeros(sizes[i], sizes[j])
    return block(grid)


@dataclass
class LmiProblem:
    vars: list[MatrixVar] = field(default_factory=list)
    psd_constraints: list[tuple[str, Affine]] = field(default_factory=list)
    eq_constraints: list[tuple[str, Affine]] = field(default_factory=list)
    objective: Affine | None = None
    sense: Literal["min", "max"] = "min"

    def var(self, name: str, dim: int, structure: Structure = "symmetric", cols: int | None = None) -> MatrixVar:
        if any(v.name == name for v in self.vars):
            raise ValueError(f"duplicate variable name {name!r}")
        v = MatrixVar(name, dim, structure, cols)
        self.vars.append(v)
        return v

    def _check_vars(self, expr: Affine):
        declared = {id(v) for v in self.vars}
        for v in expr.variables:
            if id(v) not in declared:
                raise ValueError(f"variable {v.name!r} is not declared in this problem")

    def add_psd(self, expr, name: str | None = None):
        expr = Affine.lift(expr)
        if expr.shape[0] != expr.shape[1]:
            raise ValueError("PSD constraints need square expressions")
        self._check_vars(expr)
        # symmetric by construction: average with the transpose
        expr = (expr + expr.T) * 0.5
        self.psd_constraints.append((name or f"psd{len(self.psd_constraints)}", expr))

    def add_ge(self, lhs, rhs, name: str | None = None):
        """Scalar lhs >= rhs, stored as a 1x1 PSD block."""
        self.add_psd(Affine.lift(lhs) - Affine.lift(rhs), name)

    def add_eq(self, expr, name: str | None = None):
        expr = Affine.lift(expr)
        self._check_vars(expr)
        self.eq_constraints.append((name or f"eq{len(self.eq_constraints)}", expr))

    def set_objective(self, expr, sense: Literal["min", "max"] = "min"):
        expr = Affine.lift(expr)
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar")
        self._check_vars(expr)
        self.objective = expr
        self.sense = sense

    def dump(self, stream=None) -> str:
        out = stream if stream is not None else io.StringIO()
        out.write("# constraint-id var[i,j] row col coeff\n")
        for v in self.vars:
            out.write(f"# var {v.name} structure={v.structure} shape={v.shape[0]}x{v.shape[1]}\n")
        out.write(f"# objective sense={self.sense}\n")
        items = list(self.psd_constraints) + list(self.eq_constraints)
        if self.objective is not None:
            items.append(("objective", self.objective))
        for cid, expr in items:
            kind = "eq" if any(cid == c for c, _ in self.eq_constraints) else "psd"
            out.write(f"# constraint {cid} kind={kind} shape={expr.shape[0]}x{expr.shape[1]}\n")
            for (i, j), c in np.ndenumerate(expr.const):
                if c != 0.0:
                    out.write(f"{cid} _const[0,0] {i} {j} {c:.17g}\n")
            for v, (a, b), coef in expr.coefficients():
                for (i, j), c in np.ndenumerate(coef):
                    if c != 0.0:
                        out.write(f"{cid} {v.name}[{a},{b}] {i} {j} {c:.17g}\n")
        return out.getvalue() if stream is None else ""


@dataclass
class LmiSolution:
    status: Status
    values: dict[str, np.ndarray]
    objective_value: float
    solver_stats: dict

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _cvx_variable(v: MatrixVar):
    if v.structure == "symmetric":
        return cp.Variable(v.shape, symmetric=True, name=v.name)
    if v.structure == "diagonal":
        return cp.Variable(v.dim, name=v.name)
    return cp.Variable(v.shape, name=v.name)


def _solver_options(solver: str, tol: float, max_iter: int) -> dict:
    if solver == "CLARABEL":
        return dict(tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol, max_iter=max_iter,
                    chordal_decomposition_enable=False)
    if solver == "CVXOPT":
        return dict(abstol=tol, reltol=tol, feastol=tol, max_iters=max_iter)
    if solver == "SCS":
        return dict(eps_abs=tol, eps_rel=tol, max_iters=100 * max_iter)
    return {}


_STATUS_MAP = {
    cp.OPTIMAL: "optimal",
    cp.OPTIMAL_INACCURATE: "optimal",
    cp.INFEASIBLE: "infeasible",
    cp.INFEASIBLE_INACCURATE: "infeasible",
    cp.UNBOUNDED: "unbounded",
    cp.UNBOUNDED_INACCURATE: "unbounded",
    cp.USER_LIMIT: "max_iter",
}


def psd_residual(expr: Affine, values: dict) -> tuple[float, float]:
    """(min eigenvalue, allowed slack) of a PSD block at ``values``."""
    m = expr.evaluate(values)
    m = 0.5 * (m + m.T)
    return float(np.linalg.eigvalsh(m).min()), PSD_SLACK * (1.0 + float(np.linalg.norm(m, 2)))


def certify(p: LmiProblem, values: dict) -> dict:
    """Independent feasibility re-check of every constraint at ``values``."""
    report = {"psd": {}, "eq": {}, "ok": True}
    for cid, expr in p.psd_constraints:
        lo, slack = psd_residual(expr, values)
        report["psd"][cid] = lo
        if lo < -slack:
            report["ok"] = False
    for cid, expr in p.eq_constraints:
        m = expr.evaluate(values)
        err = float(np.abs(m).max()) if m.size else 0.0
        report["eq"][cid] = err
        if err > EQ_TOL * (1.0 + max(float(np.abs(L).max()) for _, L, _, _ in expr.terms) if expr.terms else 1.0):
            report["ok"] = False
    return report


def solve(
    p: LmiProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    solvers: Iterable[str] = SOLVERS,
) -> LmiSolution:
    """Solve ``p``; reports ``optimal`` only after the independent re-check passes.

    Solvers are tried in order; a later solver is used only when an earlier one
    fails numerically or its answer does not certify.
    """
    if p.objective is None:
        raise ValueError("problem has no objective")
    cvars = {v.name: _cvx_variable(v) for v in p.vars}
    mats = {v.name: (cp.diag(cvars[v.name]) if v.structure == "diagonal" else cvars[v.name]) for v in p.vars}
    psd_cons = []
    for _, expr in p.psd_constraints:
        e = expr.to_cvxpy(mats)
        if expr.shape == (1, 1):
            psd_cons.append(e >= 0)
        else:
            psd_cons.append(0.5 * (e + e.T) >> 0)
    eq_cons = []
    for _, expr in p.eq_constraints:
        # structurally zero entries would add empty rows and make the KKT system singular
        rows, cols = np.nonzero(expr.support())
        if rows.size:
            eq_cons.append(expr.to_cvxpy(mats)[rows, cols] == 0)
    obj = p.objective.to_cvxpy(mats)
    obj = cp.sum(obj) if not isinstance(obj, np.ndarray) else float(obj.sum())
    goal = cp.Minimize(obj) if p.sense == "min" else cp.Maximize(obj)
    problem = cp.Problem(goal, psd_cons + eq_cons)

    available = set(cp.installed_solvers())
    attempts = []
    last = None
    ladder = [(solver, tol * 10.0**k) for solver in solvers if solver in available for k in range(TOL_RELAXATIONS + 1)]
    for solver, level in ladder:
        t0 = time.perf_counter()
        try:
            problem.solve(solver=solver, **_solver_options(solver, level, max_iter))
        except (cp.error.SolverError, ArithmeticError, ValueError) as exc:
            # breakdown near the optimum: retry looser, then the next backend
            attempts.append({"solver": solver, "tol": level, "error": str(exc), "time": time.perf_counter() - t0})
            continue
        elapsed = time.perf_counter() - t0
        status = _STATUS_MAP.get(problem.status, "numerical_failure")
        stats = {
            "solver": solver,
            "tol": level,
            "raw_status": problem.status,
            "time": elapsed,
            "iterations": getattr(problem.solver_stats, "num_iters", None),
        }
        if status != "optimal":
            attempts.append(stats)
            last = LmiSolution(status, {}, float("nan"), {**stats, "attempts": attempts})
            if status in ("infeasible", "unbounded"):
                return last
            continue
        values = {}
        for v in p.vars:
            val = np.asarray(cvars[v.name].value, dtype=float)
            values[v.name] = 0.5 * (val + val.T) if v.structure == "symmetric" else val
        # complementarity <Z_i, F_i(x)> summed over the cone constraints
        gap = 0.0
        for con in psd_cons:
            if con.dual_value is not None:
                gap += abs(float(np.sum(np.asarray(con.dual_value) * np.asarray(con.expr.value))))
        objective_value = float(p.objective.evaluate(values)[0, 0])
        check = certify(p, values)
        stats.update({"duality_gap": abs(gap), "certificate": check})
        attempts.append(stats)
        if check["ok"]:
            return LmiSolution("optimal", values, objective_value, {**stats, "attempts": attempts})
        last = LmiSolution("numerical_failure", values, objective_value, {**stats, "attempts": attempts})
    if last is None:
        last = LmiSolution("numerical_failure", {}, float("nan"), {"attempts": attempts})
    return last


def schur_lemma_check(A, B, C) -> bool:
    """True when the block test [A B; B' C] >= 0 and the Schur test agree.

    The Schur test is C > 0 and A - B C^-1 B' >= 0. Used as a test oracle.
    """
    A, B, C = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, B, C))
    full = np.block([[A, B], [B.T, C]])
    scale = 1.0 + float(np.abs(full).max())
    block_psd = np.linalg.eigvalsh(0.5 * (full + full.T)).min() >= -1e-12 * scale
    c_pd = np.linalg.eigvalsh(C).min() > 0
    if c_pd:
        schur = A - B @ np.linalg.solve(C, B.T)
        schur_psd = np.linalg.eigvalsh(0.5 * (schur + schur.T)).min() >= -1e-12 * scale
    else:
        schur_psd = False
    return bool(block_psd == (c_pd and schur_psd))


def schur_tests(A, B, C) -> tuple[bool, bool]:
    """The two sides compared by :func:`schur_lemma_check`: (block PSD, Schur PSD)."""
    A, B, C = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, B, C))
    full = np.block([[A, B], [B.T, C]])
    scale = 1.0 + float(np.abs(full).max())
    block_psd = bool(np.linalg.eigvalsh(0.5 * (full + full.T)).min() >= -1e-12 * scale)
    if np.linalg.eigvalsh(C).min() <= 0:
        return block_psd, False
    schur = A - B @ np.linalg.solve(C, B.T)
    return block_psd, bool(np.linalg.eigvalsh(0.5 * (schur + schur.T)).min() >= -1e-12 * scale)


def hua_identity(Z, R) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of (Z + R)^-1 = Z^-1 - (Z + Z R^-1 Z)^-1."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    for name, m in (("Z", Z), ("R", R)):
        if np.linalg.eigvalsh(0.5 * (m + m.T)).min() <= 0:
            raise np.linalg.LinAlgError(f"{name} is not positive definite")
    lhs = np.linalg.inv(Z + R)
    rhs = np.linalg.inv(Z) - np.linalg.inv(Z + Z @ np.linalg.solve(R, Z))
    return lhs, rhs
