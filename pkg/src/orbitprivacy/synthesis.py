"""Synthetic-noise and sensor-precision design under trace bounds.

Every formulation is posed as an LMI problem (see :mod:`orbitprivacy.lmi`)
and every answer is re-checked by :func:`verify_traces`, which recomputes
the masked posterior traces directly from the prior moments. Solver
variables are never reported as achieved traces.

Noise and precision are per measurement axis. With the default diagonal
structure an axis whose precision falls below ``UNNECESSARY`` is reported as
unnecessary: its noise variance is ``inf`` and the axis is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .kalman import (
    EIG_CLIP_REL,
    PriorMoments,
    posterior_covariance,
    posterior_covariance_from_precision,
    symmetrize,
)
from .lmi import DEFAULT_TOL, SOLVERS, Affine, LmiProblem, solve, sym_block
from .window import SelectionMask

Structure = Literal["diagonal", "full"]

CERT_TOL = 1e-6
UNNECESSARY = 1e-9
COND_FALLBACK = 1e10
MAX_HALVINGS = 5
# iterative modes prefer the more robust (if slower) solver first
ITER_SOLVERS = ("CVXOPT", "CLARABEL")


def _matrix(mask) -> np.ndarray:
    if isinstance(mask, SelectionMask):
        return mask.matrix
    return np.atleast_2d(np.asarray(mask, dtype=float))


@dataclass(frozen=True)
class UtilityBound:
    mask: object
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("utility gamma must be positive")


@dataclass(frozen=True)
class PrivacyBound:
    mask: object
    gamma: float | None = None
    fraction_of_prior: float | None = None

    def __post_init__(self):
        if self.gamma is not None and self.fraction_of_prior is not None:
            raise ValueError("give either gamma or fraction_of_prior, not both")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("privacy gamma must be positive")
        if self.fraction_of_prior is not None and not 0 < self.fraction_of_prior <= 1:
            raise ValueError("fraction_of_prior must lie in (0, 1]")

    def resolve(self, pm: PriorMoments) -> float | None:
        if self.fraction_of_prior is None:
            return self.gamma
        M = _matrix(self.mask)
        return self.fraction_of_prior * float(np.trace(M @ pm.sigma_xx @ M.T))


@dataclass(frozen=True)
class TradeoffSpec:
    utility: tuple[UtilityBound, ...] = ()
    privacy: tuple[PrivacyBound, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "utility", tuple(self.utility))
        object.__setattr__(self, "privacy", tuple(self.privacy))

    def utility_terms(self) -> list[tuple[np.ndarray, float]]:
        return [(_matrix(u.mask), float(u.gamma)) for u in self.utility]

    def privacy_terms(self, pm: PriorMoments) -> list[tuple[np.ndarray, float | None]]:
        return [(_matrix(p.mask), p.resolve(pm)) for p in self.privacy]


@dataclass(frozen=True)
class Traces:
    utility: tuple[float, ...]
    privacy: tuple[float, ...]


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    gamma: float
    delta: float
    oracle: float
    halvings: int = 0


@dataclass
class SynthesisResult:
    status: str
    r_data: np.ndarray | None = None
    s_data: np.ndarray | None = None
    precisions: np.ndarray | None = None
    gain: np.ndarray | None = None
    achieved_utility: tuple[float, ...] = ()
    achieved_privacy: tuple[float, ...] = ()
    iterations: tuple[IterationRecord, ...] = ()
    unnecessary: tuple[int, ...] = ()
    objective: float = float("nan")
    message: str = ""
    solver_stats: dict = field(default_factory=dict)
    problem: LmiProblem | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def coupling_error(self) -> float:
        """max |S R - I| over finite axes (relative to 1)."""
        if self.r_data is None or self.s_data is None:
            return 0.0
        s, r = self.s_data, self.r_data
        off = ~np.eye(s.shape[0], dtype=bool)
        if np.count_nonzero(s[off]) == 0 and np.count_nonzero(r[off]) == 0:
            sd, rd = np.diag(s), np.diag(r)
            ok = np.isfinite(sd) & np.isfinite(rd) & (sd > 0)
            return float(np.abs(sd[ok] * rd[ok] - 1.0).max()) if ok.any() else 0.0
        return float(np.abs(s @ r - np.eye(s.shape[0])).max())


# --- verification oracle ----------------------------------------------------

def _masked_traces(post: np.ndarray, masks: Sequence[np.ndarray]) -> tuple[float, ...]:
    return tuple(float(np.trace(M @ post @ M.T)) for M in masks)


def spec_traces(post: np.ndarray, spec: TradeoffSpec) -> Traces:
    """Masked traces of a posterior covariance for every bound in ``spec``."""
    return Traces(
        _masked_traces(post, [_matrix(u.mask) for u in spec.utility]),
        _masked_traces(post, [_matrix(p.mask) for p in spec.privacy]),
    )


def posterior_with_noise(pm: PriorMoments, r_data) -> np.ndarray:
    """Posterior covariance for synthetic noise ``r_data`` (None = no noise).

    A diagonal ``r_data`` may contain ``inf`` for axes that are not shared.
    """
    if r_data is None:
        return posterior_covariance(pm, None)
    r = np.atleast_2d(np.asarray(r_data, dtype=float))
    if np.all(np.isfinite(r)):
        return posterior_covariance(pm, r)
    if np.count_nonzero(r[~np.eye(r.shape[0], dtype=bool)]) != 0:
        raise ValueError("infinite noise is only supported on a diagonal r_data")
    keep = np.flatnonzero(np.isfinite(np.diag(r)))
    if keep.size == 0:
        return pm.sigma_xx.copy()
    sub = pm.restrict(np.arange(pm.state_dim), keep)
    return posterior_covariance(sub, r[np.ix_(keep, keep)])


def verify_traces(pm: PriorMoments, r_data, spec: TradeoffSpec) -> Traces:
    """Masked posterior traces for synthetic noise ``r_data``; see :func:`posterior_with_noise`."""
    return spec_traces(posterior_with_noise(pm, r_data), spec)


def verify_precision(pm: PriorMoments, s_data, spec: TradeoffSpec) -> Traces:
    """Same oracle, parameterized by the data precision (zero = axis withheld)."""
    return spec_traces(posterior_covariance_from_precision(pm, s_data), spec)


def _utility_ok(tr: Traces, spec: TradeoffSpec, tol: float = CERT_TOL) -> bool:
    return all(t <= u.gamma + tol for t, u in zip(tr.utility, spec.utility))


def _privacy_ok(tr: Traces, gammas: Sequence[float | None], tol: float = CERT_TOL) -> bool:
    return all(g is None or t >= g - tol for t, g in zip(tr.privacy, gammas))


def _polish(matrix: np.ndarray, ok, max_factor: float = 1.01) -> tuple[np.ndarray | None, float]:
    """Smallest scale factor >= 1 (to ~1e-12) making ``ok(factor * matrix, tol)`` true.

    Used to absorb interior-point tolerance: scaling precision up (or noise
    up) moves monotonically toward the constraint the solver only met to
    within its tolerance. The bound is first met exactly (tol = 0) so that
    recomputing the traces another way keeps the CERT_TOL band as headroom;
    the band itself is used only when the exact bound is out of reach.
    """
    for tol in (0.0, CERT_TOL):
        out = _polish_at(matrix, lambda cand: ok(cand, tol), max_factor)
        if out[0] is not None:
            return out
    return None, float("nan")


def _polish_at(matrix: np.ndarray, ok, max_factor: float) -> tuple[np.ndarray | None, float]:
    if ok(matrix):
        return matrix, 1.0
    lo, step = 1.0, 1e-10
    hi = None
    while 1.0 + step <= max_factor:
        if ok(matrix * (1.0 + step)):
            hi = 1.0 + step
            break
        lo = 1.0 + step
        step *= 4.0
    if hi is None:
        return None, float("nan")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if ok(matrix * mid):
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return matrix * hi, hi


# --- helpers ----------------------------------------------------------------

def _factor(a: np.ndarray) -> np.ndarray:
    """Low-rank factor F with a = F F' (eigenvalues below EIG_CLIP_REL * max dropped)."""
    a = symmetrize(np.atleast_2d(np.asarray(a, dtype=float)))
    w, v = np.linalg.eigh(a)
    top = max(float(w.max()), 0.0) if w.size else 0.0
    keep = w > EIG_CLIP_REL * top if top > 0 else np.zeros_like(w, dtype=bool)
    return v[:, keep] * np.sqrt(w[keep])


DATA_SCALE_POWER = 0.25


def _scaled(pm: PriorMoments) -> tuple[PriorMoments, float]:
    """Prior divided by c = (largest block norm) ** DATA_SCALE_POWER, and c.

    Traces and noise variances scale by 1/c, precisions by c, gains not at
    all. Problems are built on scaled data; the oracle always sees pm. The
    unknowns (bounds, noise variances) are O(1) km^2 while long-window priors
    reach 1e7 km^2: dividing by the full norm pushes the unknowns below the
    solver tolerances, so the range is split between the two instead.
    """
    top = max(np.linalg.norm(pm.sigma_xx, 2), np.linalg.norm(pm.sigma_yy + pm.r_sensor, 2))
    c = float(top) ** DATA_SCALE_POWER if np.isfinite(top) and top > 1.0 else 1.0
    return PriorMoments(pm.sigma_xx / c, pm.sigma_xy / c, pm.sigma_yy / c, pm.r_sensor / c), c


def _with_scale(sol, c: float):
    sol.solver_stats["data_scale"] = c
    return sol


def _diag_clean(s: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    s = np.where(s < UNNECESSARY, 0.0, s)
    return s, tuple(int(i) for i in np.nonzero(s == 0.0)[0])


def _noise_from_precision(s_diag: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(s_diag > 0, 1.0 / np.where(s_diag > 0, s_diag, 1.0), np.inf)


def _precision_result_fields(S: np.ndarray, structure: Structure):
    """(s_data, r_data, unnecessary) from a solved precision matrix."""
    if structure == "diagonal":
        s, off = _diag_clean(np.diag(S).copy())
        return np.diag(s), np.diag(_noise_from_precision(s)), off
    S = symmetrize(S)
    w, v = np.linalg.eigh(S)
    w = np.where(w < UNNECESSARY, 0.0, w)
    S = (v * w) @ v.T
    if np.all(w > 0):
        return S, np.linalg.inv(S), ()
    return S, None, tuple(int(i) for i in np.nonzero(w == 0.0)[0])


def _precision_var(p: LmiProblem, name: str, m: int, structure: Structure):
    v = p.var(name, m, "diagonal" if structure == "diagonal" else "symmetric")
    _add_nonneg(p, v.expr, structure, name)
    return v


def _add_nonneg(p: LmiProblem, expr: Affine, structure: Structure, name: str):
    if structure == "diagonal":
        for k in range(expr.shape[0]):
            p.add_ge(expr.entry(k, k), 0.0, f"{name}_nonneg{k}")
    else:
        p.add_psd(expr, f"{name}_psd")


def _gain_rows(masks: Sequence[np.ndarray], n: int) -> np.ndarray:
    """State rows touched by the masks; other rows of K do not enter any bound."""
    used = np.zeros(n, dtype=bool)
    for M in masks:
        used |= np.abs(M).sum(axis=0) > 0
    return np.nonzero(used)[0]


class _Gain:
    def __init__(self, p: LmiProblem, n: int, m: int, rows: np.ndarray):
        self.rows = rows
        self.n, self.m = n, m
        self.sel = np.eye(n)[rows]
        self.var = p.var("K", len(rows), "full", m)

    def left(self, M: np.ndarray) -> Affine:
        """M K as an affine expression."""
        return (M @ self.sel.T) @ self.var.expr

    def full(self, values: dict) -> np.ndarray:
        K = np.zeros((self.n, self.m))
        K[self.rows] = values[self.var.name]
        return K


def _utility_block(M, F, C, G, gain: _Gain | None, S: Affine | None, Q: Affine, noisy: int | None = None) -> Affine:
    """LMI equivalent to Q >= M (I-KC) P (I-KC)' M' + M K (Rs + S^-1) K' M'.

    P = F F' and Rs = G G'; both factors may be low rank. Only the first
    ``noisy`` shared axes carry synthetic noise (default: all of them); the
    rest are shared with sensor noise only. With no shared measurements
    (gain None) it reduces to Q >= M P M'.
    """
    MF = M @ F
    r = F.shape[1]
    if gain is None:
        return sym_block([[Q, MF], [None, np.eye(r)]])
    MK = gain.left(M)
    A = MK @ (C @ F) * -1.0 + MF
    noisy = C.shape[0] if noisy is None else noisy
    cols = [Q, A]
    diag = [np.eye(r)]
    if G is not None and G.shape[1] > 0:
        cols.append(MK @ G)
        diag.append(np.eye(G.shape[1]))
    if noisy > 0:
        E = np.eye(C.shape[0])[:, :noisy]
        cols.append(MK @ E)
        diag.append(S)
    k = len(cols)
    rows = [cols] + [[None] * i + [diag[i - 1]] + [None] * (k - i - 1) for i in range(1, k)]
    return sym_block(rows)


def _privacy_block(M, sxx, sxy, z, R: Affine | None, Q: Affine) -> Affine:
    """LMI equivalent to M Sxx M' - M Sxy (Z + R)^-1 Sxy' M' >= Q."""
    top = M @ sxx @ M.T - Q
    if sxy.shape[1] == 0:
        return top
    inner = Affine.constant(z) if R is None else R + z
    return sym_block([[top, M @ sxy], [None, inner]])


def _status_result(sol, message: str = "") -> SynthesisResult:
    return SynthesisResult(status=sol.status, message=message or f"solver status {sol.status}",
                           solver_stats=sol.solver_stats)


# --- single-shot formulations -------------------------------------------------

def _utility_floor(pm: PriorMoments, spec: TradeoffSpec) -> Traces:
    """Masked traces with noise-free shared data (the best any design can do)."""
    return verify_traces(pm, None, spec)


def max_noise_for_utility(
    pm: PriorMoments,
    spec: TradeoffSpec,
    *,
    structure: Structure = "diagonal",
    C: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    solvers: Sequence[str] = SOLVERS,
) -> SynthesisResult:
    """Largest synthetic noise (smallest trace of its precision) meeting every utility bound.

    Falls back to the square-root formulation when Z = Syy + Rs is
    ill-conditioned; that needs the measurement matrix, taken from ``C`` or
    recovered from Sxy = Sxx C'.
    """
    if not spec.utility:
        raise ValueError("max_noise_for_utility needs at least one utility bound")
    floor = _utility_floor(pm, spec)
    if not _utility_ok(floor, spec, 0.0):
        return _infeasible_utility(floor, spec)
    z = symmetrize(pm.sigma_yy + pm.r_sensor)
    if np.linalg.cond(z) > COND_FALLBACK:
        return _sqrt_fallback(pm, C, spec, structure, tol, solvers, "ill-conditioned Z")

    m = pm.meas_dim
    ps, c = _scaled(pm)
    z = symmetrize(ps.sigma_yy + ps.r_sensor)
    p = LmiProblem()
    S = _precision_var(p, "S", m, structure)
    zinv_sxy = np.linalg.solve(z, ps.sigma_xy.T)
    for j, (M, gamma) in enumerate(spec.utility_terms()):
        Q = p.var(f"Qu{j}", M.shape[0])
        top = Q.expr + (M @ ps.sigma_xy @ zinv_sxy @ M.T - M @ ps.sigma_xx @ M.T)
        p.add_psd(sym_block([[top, M @ ps.sigma_xy], [None, z @ S.expr @ z + z]]), f"utility{j}")
        p.add_ge(gamma / c, Q.expr.trace(), f"utility{j}_trace")
    p.set_objective(S.expr.trace(), "min")
    sol = _with_scale(solve(p, tol=tol, solvers=solvers), c)
    if sol.status == "infeasible":
        return _status_result(sol)
    if not sol.optimal:
        # Z S Z spans many orders of magnitude on long windows; the gain form avoids it
        return _sqrt_fallback(pm, C, spec, structure, tol, solvers, "inverse form failed numerically")
    return _finish_precision(pm, spec, S.as_matrix(sol.values["S"]) / c, structure, sol, p)


def _sqrt_fallback(pm, C, spec, structure, tol, solvers, reason: str) -> SynthesisResult:
    if C is None:
        C = _recover_measurement_matrix(pm)
    res = max_noise_for_utility_sqrt(pm, C, spec, structure=structure, tol=tol, solvers=solvers)
    res.message = (res.message + "; " if res.message else "") + f"{reason}: used the square-root formulation"
    res.solver_stats["formulation"] = "sqrt"
    return res


def _recover_measurement_matrix(pm: PriorMoments) -> np.ndarray:
    C = np.linalg.lstsq(pm.sigma_xx, pm.sigma_xy, rcond=None)[0].T
    scale = 1.0 + float(np.abs(pm.sigma_xy).max())
    if np.abs(pm.sigma_xx @ C.T - pm.sigma_xy).max() > 1e-8 * scale:
        raise ValueError("cannot recover a linear measurement matrix from the prior; pass C")
    return C


def _infeasible_utility(floor: Traces, spec: TradeoffSpec) -> SynthesisResult:
    bad = [f"mask {j}: floor {t:.6g} > gamma {u.gamma:.6g}"
           for j, (t, u) in enumerate(zip(floor.utility, spec.utility)) if t > u.gamma]
    return SynthesisResult(
        status="infeasible",
        achieved_utility=floor.utility,
        message="utility unreachable even with noise-free data (" + "; ".join(bad) + ")",
    )


def _finish_precision(pm, spec, S, structure, sol, p, gain=None, oracle_pm=None) -> SynthesisResult:
    oracle_pm = pm if oracle_pm is None else oracle_pm
    S = np.atleast_2d(np.asarray(S, dtype=float))
    s_data, _, _ = _precision_result_fields(S, structure)

    def ok(candidate, tol):
        return _utility_ok(verify_precision(oracle_pm, candidate, spec), spec, tol)

    polished, factor = _polish(s_data, ok)
    if polished is None:
        tr = verify_precision(oracle_pm, s_data, spec)
        return SynthesisResult(
            status="numerical_failure", s_data=s_data, achieved_utility=tr.utility, achieved_privacy=tr.privacy,
            message="solver answer does not certify against the oracle", solver_stats=sol.solver_stats, problem=p,
        )
    s_data, r_data, off = _precision_result_fields(polished, structure)
    tr = verify_precision(oracle_pm, s_data, spec)
    stats = dict(sol.solver_stats)
    stats["polish_factor"] = factor
    return SynthesisResult(
        status="optimal", r_data=r_data, s_data=s_data,
        precisions=np.diag(s_data).copy() if structure == "diagonal" else None,
        gain=gain, achieved_utility=tr.utility, achieved_privacy=tr.privacy, unnecessary=off,
        objective=float(np.trace(s_data)), solver_stats=stats, problem=p,
    )


def max_noise_for_utility_sqrt(
    pm: PriorMoments,
    C: np.ndarray,
    spec: TradeoffSpec,
    *,
    structure: Structure = "diagonal",
    tol: float = DEFAULT_TOL,
    solvers: Sequence[str] = SOLVERS,
) -> SynthesisResult:
    """Same design as :func:`max_noise_for_utility`, posed over the gain K.

    Uses factors of Sxx and Rs instead of any matrix inverse.
    """
    if not spec.utility:
        raise ValueError("max_noise_for_utility_sqrt needs at least one utility bound")
    C = np.atleast_2d(np.asarray(C, dtype=float))
    floor = _utility_floor(pm, spec)
    if not _utility_ok(floor, spec, 0.0):
        return _infeasible_utility(floor, spec)
    n, m = pm.state_dim, pm.meas_dim
    ps, c = _scaled(pm)
    F = _factor(ps.sigma_xx)
    G = _factor(ps.r_sensor)
    terms = spec.utility_terms()
    p = LmiProblem()
    S = _precision_var(p, "S", m, structure)
    gain = _Gain(p, n, m, _gain_rows([M for M, _ in terms], n))
    for j, (M, gamma) in enumerate(terms):
        Q = p.var(f"Qu{j}", M.shape[0])
        p.add_psd(_utility_block(M, F, C, G, gain, S.expr, Q.expr), f"utility{j}")
        p.add_ge(gamma / c, Q.expr.trace(), f"utility{j}_trace")
    p.set_objective(S.expr.trace(), "min")
    sol = _with_scale(solve(p, tol=tol, solvers=solvers), c)
    if not sol.optimal:
        return _status_result(sol)
    return _finish_precision(pm, spec, S.as_matrix(sol.values["S"]) / c, structure, sol, p,
                             gain=gain.full(sol.values))


def min_precision_for_utility(
    pm: PriorMoments,
    C: np.ndarray,
    spec: TradeoffSpec,
    *,
    tol: float = DEFAULT_TOL,
    solvers: Sequence[str] = SOLVERS,
) -> SynthesisResult:
    """Smallest total per-axis sensor precision meeting the utility bounds.

    Here the precision is that of the sensor itself, so ``pm.r_sensor`` is
    ignored. Minimizing the sum of precisions tends to switch whole sensors
    off.
    """
    if not spec.utility:
        raise ValueError("min_precision_for_utility needs at least one utility bound")
    C = np.atleast_2d(np.asarray(C, dtype=float))
    bare = pm.with_sensor_noise(np.zeros((pm.meas_dim, pm.meas_dim)))
    n, m = pm.state_dim, pm.meas_dim
    # floor: perfect measurements (zero noise; a huge finite precision loses accuracy)
    floor = verify_traces(bare, None, spec)
    if not _utility_ok(floor, spec, 0.0):
        return _infeasible_utility(floor, spec)
    ps, c = _scaled(bare)
    F = _factor(ps.sigma_xx)
    terms = spec.utility_terms()
    p = LmiProblem()
    lam = _precision_var(p, "lambda", m, "diagonal")
    gain = _Gain(p, n, m, _gain_rows([M for M, _ in terms], n))
    for j, (M, gamma) in enumerate(terms):
        Q = p.var(f"Qu{j}", M.shape[0])
        p.add_psd(_utility_block(M, F, C, None, gain, lam.expr, Q.expr), f"utility{j}")
        p.add_ge(gamma / c, Q.expr.trace(), f"utility{j}_trace")
    p.set_objective(lam.expr.trace(), "min")
    sol = _with_scale(solve(p, tol=tol, solvers=solvers), c)
    if not sol.optimal:
        return _status_result(sol)
    return _finish_precision(bare, spec, np.diag(sol.values["lambda"]) / c, "diagonal", sol, p,
                             gain=gain.full(sol.values))


def min_noise_for_privacy(
    pm: PriorMoments,
    spec: TradeoffSpec,
    *,
    structure: Structure = "diagonal",
    tol: float = DEFAULT_TOL,
    solvers: Sequence[str] = SOLVERS,
) -> SynthesisResult:
    """Smallest synthetic noise (trace of its covariance) meeting every privacy bound."""
    if not spec.privacy:
        raise ValueError("min_noise_for_privacy needs at least one privacy bound")
    terms = spec.privacy_terms(pm)
    if any(g is None for _, g in terms):
        raise ValueError("min_noise_for_privacy needs a gamma (or fraction) on every privacy bound")
    gammas = [g for _, g in terms]
    prior = [float(np.trace(M @ pm.sigma_xx @ M.T)) for M, _ in terms]
    over = [f"mask {i}: gamma {g:.6g} > prior trace {t:.6g}" for i, (g, t) in enumerate(zip(gammas, prior)) if g > t]
    if over:
        return SynthesisResult(status="infeasible", message="privacy beyond the prior ceiling (" + "; ".join(over) + ")")
    m = pm.meas_dim
    floor = verify_traces(pm, None, spec)
    if _privacy_ok(floor, gammas, 0.0):
        zero = np.zeros((m, m))
        return SynthesisResult(status="optimal", r_data=zero, s_data=None, achieved_utility=floor.utility,
                               achieved_privacy=floor.privacy, objective=0.0,
                               message="privacy already met without synthetic noise")
    ps, c = _scaled(pm)
    z = symmetrize(ps.sigma_yy + ps.r_sensor)
    p = LmiProblem()
    R = p.var("R", m, "diagonal" if structure == "diagonal" else "symmetric")
    _add_nonneg(p, R.expr, structure, "R")
    for i, (M, gamma) in enumerate(terms):
        Q = p.var(f"Qp{i}", M.shape[0])
        p.add_psd(_privacy_block(M, ps.sigma_xx, ps.sigma_xy, z, R.expr, Q.expr), f"privacy{i}")
        p.add_ge(Q.expr.trace(), gamma / c, f"privacy{i}_trace")
    p.set_objective(R.expr.trace(), "min")
    sol = _with_scale(solve(p, tol=tol, solvers=solvers), c)
    if not sol.optimal:
        return _status_result(sol)
    Rv = R.as_matrix(sol.values["R"]) * c
    Rv = np.diag(np.clip(np.diag(Rv), 0.0, None)) if structure == "diagonal" else _clip(Rv)

    def ok(candidate, tol):
        return _privacy_ok(verify_traces(pm, candidate, spec), gammas, tol)

    polished, factor = _polish(Rv, ok)
    if polished is None:
        return SynthesisResult(status="numerical_failure", r_data=Rv, problem=p, solver_stats=sol.solver_stats,
                               message="solver answer does not certify against the oracle")
    tr = verify_traces(pm, polished, spec)
    s_data = None
    if structure == "diagonal":
        d = np.diag(polished)
        with np.errstate(divide="ignore"):
            s_data = np.diag(np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), np.inf))
    elif np.linalg.eigvalsh(polished).min() > 0:
        s_data = np.linalg.inv(polished)
    stats = dict(sol.solver_stats)
    stats["polish_factor"] = factor
    return SynthesisResult(status="optimal", r_data=polished, s_data=s_data, achieved_utility=tr.utility,
                           achieved_privacy=tr.privacy, objective=float(np.trace(polished)),
                           solver_stats=stats, problem=p)


def _clip(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(symmetrize(a))
    return (v * np.clip(w, 0.0, None)) @ v.T


# --- iterative tradeoff designs ---------------------------------------------------

@dataclass
class _Iterate:
    """Current linearization point: per-axis precision s and noise r = 1/s.

    ``off`` axes are withheld (s = 0, r = inf); ``raw`` axes are shared
    without synthetic noise (s = inf, r = 0).
    """
    s: np.ndarray
    off: np.ndarray
    raw: np.ndarray

    @property
    def r(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.off, np.inf, np.where(self.raw, 0.0, 1.0 / np.where(self.s > 0, self.s, 1.0)))

    @property
    def free(self) -> np.ndarray:
        return ~(self.off | self.raw)

    def precision(self) -> np.ndarray:
        """Precision matrix for the oracle (raw axes get a very large value)."""
        s = np.where(self.off, 0.0, self.s)
        return np.diag(np.where(self.raw, _RAW_PRECISION, s))

    def noise(self) -> np.ndarray:
        return np.diag(self.r)

    def refreeze(self):
        top = max(1.0, float(self.s[self.free].max())) if self.free.any() else 1.0
        self.off |= self.free & (self.s < UNNECESSARY * top)
        r = self.r
        rtop = max(1.0, float(r[self.free].max())) if self.free.any() else 1.0
        self.raw |= self.free & (r < UNNECESSARY * rtop)


_RAW_PRECISION = 1e15


def _tradeoff_problem(pm, C, it: _Iterate, util_terms, priv_terms, mode):
    """One linearized subproblem; returns (problem, handles).

    The linearized coupling S~ Rbar + Sbar R~ = 0 is solved in relative
    coordinates: S = Sbar (I + D), R = Rbar (I - D) with D diagonal, which
    satisfies it identically. S >= 0 and R >= 0 become -1 <= D <= 1. In the
    utility LMI the gain columns are scaled by sqrt(Sbar) (a congruence), so
    the precision block reads I + D. The problem is built on scaled data, where
    D is unchanged; the objective is in scaled units (multiply by ``scale``).
    """
    pm, c = _scaled(pm)
    util_terms = [(M, g / c) for M, g in util_terms]
    priv_terms = [(M, None if g is None else g / c) for M, g in priv_terms]
    n = pm.state_dim
    free = np.nonzero(it.free)[0]
    raw = np.nonzero(it.raw)[0]
    mf = len(free)
    F = _factor(pm.sigma_xx)
    p = LmiProblem()
    step = p.var("D", mf, "diagonal") if mf else None
    sbar, rbar = it.s[free] * c, it.r[free] / c
    if mf:
        for k in range(mf):
            d = step.expr.entry(k, k)
            p.add_ge(d, -1.0, f"S_nonneg{k}")
            p.add_ge(1.0, d, f"R_nonneg{k}")

    # utility side: shared axes; raw axes carry only sensor noise
    order = np.concatenate([free, raw])
    scale = np.concatenate([np.sqrt(sbar), np.ones(len(raw))])
    Cs = scale[:, None] * C[order]
    G = _factor(pm.r_sensor[np.ix_(order, order)])
    Gs = scale[:, None] * G
    rows = _gain_rows([M for M, _ in util_terms], n)
    gain = _Gain(p, n, len(order), rows) if len(order) and len(rows) else None
    S_rel = step.expr + np.eye(mf) if mf else None
    gu = []
    for j, (M, gamma) in enumerate(util_terms):
        Q = p.var(f"Qu{j}", M.shape[0])
        blk = _utility_block(M, F, Cs, Gs, gain, S_rel, Q.expr, noisy=mf)
        p.add_psd(blk, f"utility{j}")
        if mode == "privacy_aware":
            g = p.var(f"gu{j}", 1, "scalar")
            gu.append(g)
            p.add_ge(g.expr, Q.expr.trace(), f"utility{j}_trace")
        else:
            p.add_ge(gamma, Q.expr.trace(), f"utility{j}_trace")

    # privacy side: free axes with linearized noise, raw axes noise-free
    z = pm.sigma_yy + pm.r_sensor
    zs = z[np.ix_(order, order)]
    sxy = pm.sigma_xy[:, order]
    R_full = None
    if mf:
        R_full = _embed_free(np.diag(rbar) - np.diag(rbar) @ step.expr, mf, len(order))
    gp = []
    for i, (M, gamma) in enumerate(priv_terms):
        Q = p.var(f"Qp{i}", M.shape[0])
        p.add_psd(_privacy_block(M, pm.sigma_xx, sxy, zs, R_full, Q.expr), f"privacy{i}")
        if mode == "utility_aware":
            g = p.var(f"gp{i}", 1, "scalar")
            gp.append(g)
            p.add_ge(Q.expr.trace(), g.expr, f"privacy{i}_trace")
        else:
            p.add_ge(Q.expr.trace(), gamma, f"privacy{i}_trace")
    if mode == "utility_aware":
        obj = sum((g.expr for g in gp[1:]), gp[0].expr)
        p.set_objective(obj, "max")
    else:
        obj = sum((g.expr for g in gu[1:]), gu[0].expr)
        p.set_objective(obj, "min")
    return p, {"free": free, "order": order, "gain": gain, "scale": scale, "data_scale": c}


def _embed_free(block: Affine, mf: int, total: int) -> Affine:
    """Place an mf x mf expression in the top-left of a total x total zero matrix."""
    E = np.zeros((total, mf))
    E[:mf, :mf] = np.eye(mf)
    return E @ block @ E.T


def _iterative(pm, C, spec, mode, eps, max_iter, init, tol, solvers, callback=None):
    C = np.atleast_2d(np.asarray(C, dtype=float))
    util_terms = spec.utility_terms()
    priv_terms = spec.privacy_terms(pm)
    priv_gammas = [g for _, g in priv_terms]
    m = pm.meas_dim
    if mode == "utility_aware":
        if not spec.privacy:
            raise ValueError("utility_aware_privacy needs at least one privacy mask")
        floor = verify_traces(pm, None, spec)
        if spec.utility and not _utility_ok(floor, spec, 0.0):
            return _infeasible_utility(floor, spec)
        priv_terms = [(M, None) for M, _ in priv_terms]
    else:
        if not spec.utility:
            raise ValueError("privacy_aware_utility needs at least one utility mask")
        if any(g is None for g in priv_gammas):
            raise ValueError("privacy_aware_utility needs a gamma (or fraction) on every privacy bound")
        prior = [float(np.trace(M @ pm.sigma_xx @ M.T)) for M, _ in priv_terms]
        if any(g > t for g, t in zip(priv_gammas, prior)):
            return SynthesisResult(status="infeasible", message="privacy beyond the prior ceiling")

    def certified(cand: _Iterate, tol: float = CERT_TOL) -> bool:
        tr = verify_precision(pm, cand.precision(), spec)
        if mode == "utility_aware":
            return _utility_ok(tr, spec, tol)
        return _privacy_ok(tr, priv_gammas, tol)

    it = _Iterate(np.full(m, float(init)), np.zeros(m, bool), np.zeros(m, bool))
    it, init_used = _feasible_start(it, certified, mode)
    if it is None:
        return SynthesisResult(status="infeasible", message="no feasible starting point found by scaling the initial precision")
    history: list[IterationRecord] = []
    old = None
    status = "max_iter"
    msg = ""
    last_sol = None
    last_problem = None
    gain_full = None

    for k in range(max_iter):
        p, h = _tradeoff_problem(pm, C, it, util_terms, priv_terms, mode)
        sol = solve(p, tol=tol, solvers=solvers)
        last_problem = p
        if not sol.optimal:
            if k == 0 and sol.status == "infeasible":
                return SynthesisResult(status="infeasible", message="linearized subproblem infeasible at the start point",
                                       solver_stats=sol.solver_stats, problem=p)
            status = sol.status
            msg = f"subproblem {k + 1} not solved ({sol.status}); returning the last certified iterate"
            break
        last_sol = sol
        free = h["free"]
        gamma = float(sol.objective_value) * h["data_scale"]
        rel = np.clip(sol.values["D"].reshape(-1), -1.0, 1.0) if len(free) else np.zeros(0)
        step_s = it.s[free] * rel
        step_r = -it.r[free] * rel
        cand = None
        for halvings in range(MAX_HALVINGS + 1):
            trial = _step(it, free, 0.5 ** halvings * step_s, 0.5 ** halvings * step_r, mode)
            if certified(trial):
                cand = trial
                break
            # interior-point tolerance: a minimal scale-up (<= 1 %) may be all that is missing
            cand = _scale_iterate(trial, certified, up=(mode == "utility_aware"))
            if cand is not None:
                break
        if cand is None:
            status = "numerical_failure"
            msg = f"iterate {k + 1} could not be certified after {MAX_HALVINGS} halvings"
            break
        it = cand
        it.refreeze()
        gain_full = _expand_gain(h, sol.values, m)
        tr = verify_precision(pm, it.precision(), spec)
        oracle = sum(tr.privacy) if mode == "utility_aware" else sum(tr.utility)
        delta = float("inf") if old is None else abs(gamma - old)
        history.append(IterationRecord(k + 1, gamma, delta, oracle, halvings))
        if callback is not None:
            callback(history[-1])
        if old is not None and delta <= eps:
            status = "optimal"
            break
        old = gamma

    S = it.precision()
    tr = verify_precision(pm, S, spec)
    ok = _utility_ok(tr, spec) if mode == "utility_aware" else _privacy_ok(tr, priv_gammas)
    if status == "optimal" and not ok:
        status = "numerical_failure"
    s_diag = np.where(it.raw, np.inf, np.where(it.off, 0.0, it.s))
    stats = dict(last_sol.solver_stats) if last_sol is not None else {}
    stats["initial_precision"] = init_used
    if status == "max_iter":
        msg = f"no convergence to eps={eps:g} within {max_iter} iterations (last delta {history[-1].delta:.3g})" \
            if history else "no iterations"
    return SynthesisResult(
        status=status, r_data=np.diag(it.r), s_data=np.diag(s_diag), precisions=s_diag.copy(), gain=gain_full,
        achieved_utility=tr.utility, achieved_privacy=tr.privacy, iterations=tuple(history),
        unnecessary=tuple(int(i) for i in np.nonzero(it.off)[0]),
        objective=history[-1].gamma if history else float("nan"), message=msg, solver_stats=stats,
        problem=last_problem,
    )


def _step(it: _Iterate, free: np.ndarray, step_s, step_r, mode: str) -> _Iterate:
    trial = _Iterate(it.s.copy(), it.off.copy(), it.raw.copy())
    if mode == "utility_aware":
        trial.s[free] = np.clip(it.s[free] + step_s, 0.0, None)
    else:
        r_new = np.clip(it.r[free] + step_r, 0.0, None)
        trial.raw[free] = r_new == 0
        trial.s[free] = np.where(r_new > 0, 1.0 / np.where(r_new > 0, r_new, 1.0), _RAW_PRECISION)
    return trial


def _feasible_start(it: _Iterate, certified, mode: str, max_doublings: int = 60):
    """Scale a uniform start until the hard side holds, so that a zero step is feasible.

    Utility-aware mode raises the precision; privacy-aware mode raises the noise.
    """
    factor = 2.0 if mode == "utility_aware" else 0.5
    for _ in range(max_doublings):
        if certified(it):
            return it, float(it.s[0]) if it.s.size else 0.0
        it = _Iterate(it.s * factor, it.off, it.raw)
    return None, float("nan")


def _scale_iterate(trial: _Iterate, certified, up: bool) -> _Iterate | None:
    base = trial.s.copy()

    def ok(factor_vec, tol):
        t = _Iterate(factor_vec, trial.off.copy(), trial.raw.copy())
        return certified(t, tol)

    if up:
        scaled, _ = _polish(base, ok)
    else:
        # more noise = less precision: polish the noise vector instead
        with np.errstate(divide="ignore"):
            r = np.where(base > 0, 1.0 / np.where(base > 0, base, 1.0), np.inf)

        def ok_r(rv, tol):
            with np.errstate(divide="ignore"):
                return ok(np.where(np.isinf(rv), 0.0, 1.0 / rv), tol)

        rs, _ = _polish(r, ok_r)
        scaled = None if rs is None else np.where(np.isinf(rs), 0.0, 1.0 / rs)
    if scaled is None:
        return None
    return _Iterate(scaled, trial.off.copy(), trial.raw.copy())


def _expand_gain(h, values, m) -> np.ndarray | None:
    gain = h["gain"]
    if gain is None:
        return None
    K = gain.full(values) * h["scale"][None, :]
    out = np.zeros((K.shape[0], m))
    out[:, h["order"]] = K
    return out


def utility_aware_privacy(
    pm: PriorMoments,
    C: np.ndarray,
    spec: TradeoffSpec,
    *,
    eps: float = 1e-3,
    max_iter: int = 50,
    init: float = 1.0,
    tol: float = DEFAULT_TOL,
    solvers: Sequence[str] = ITER_SOLVERS,
    callback=None,
) -> SynthesisResult:
    """Maximize the privacy traces subject to the utility bounds.

    The noise/precision coupling R = S^-1 is linearized about the current
    iterate; after each solve the precision is updated and the noise is
    recomputed as its exact inverse. Stops when the objective changes by at
    most ``eps``. An iterate whose oracle check violates a utility bound by
    more than 1e-6 is retried with the step halved (up to 5 times).
    """
    return _iterative(pm, C, spec, "utility_aware", eps, max_iter, init, tol, solvers, callback)


def privacy_aware_utility(
    pm: PriorMoments,
    C: np.ndarray,
    spec: TradeoffSpec,
    *,
    eps: float = 1e-3,
    max_iter: int = 50,
    init: float = 1.0,
    tol: float = DEFAULT_TOL,
    solvers: Sequence[str] = ITER_SOLVERS,
    callback=None,
) -> SynthesisResult:
    """Minimize the utility traces subject to the privacy bounds (noise-side update)."""
    return _iterative(pm, C, spec, "privacy_aware", eps, max_iter, init, tol, solvers, callback)
