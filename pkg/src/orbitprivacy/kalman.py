"""Ensemble and unscented moment machinery shared by the EnKF and UKF pipelines.

Both filters reduce to the same second-moment update once the prior blocks
(Sxx, Sxy, Syy) are known, so everything downstream only consumes
:class:`PriorMoments`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

EIG_CLIP_REL = 1e-12
PSD_NEG_TOL = 1e-10
REG_COND_LIMIT = 1e12
REG_SCALE = 1e-12


class PropagationError(RuntimeError):
    def __init__(self, member: int, cause: Exception):
        self.member = member
        self.cause = cause
        super().__init__(f"ensemble member {member}: {cause}")


class NumericalError(ArithmeticError):
    pass


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def sym_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below 1e-12 * max are set to zero."""
    a = symmetrize(np.atleast_2d(np.asarray(a, dtype=float)))
    w, v = np.linalg.eigh(a)
    top = w.max() if w.size else 0.0
    w = np.where(w > EIG_CLIP_REL * max(top, 0.0), w, 0.0)
    return symmetrize((v * np.sqrt(w)) @ v.T)


def clip_psd(a: np.ndarray) -> np.ndarray:
    """Symmetrize and clip slightly negative eigenvalues (round-off) to zero."""
    a = symmetrize(a)
    w, v = np.linalg.eigh(a)
    if w.size == 0 or w.min() >= 0.0:
        return a
    return symmetrize((v * np.clip(w, 0.0, None)) @ v.T)


@dataclass(frozen=True)
class SigmaConfig:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def scaling(self, n: int) -> float:
        """The scaling parameter rho = alpha^2 (n + kappa) - n."""
        return self.alpha**2 * (n + self.kappa) - n


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        cov = symmetrize(cov)
        if cov.size:
            w_min = np.linalg.eigvalsh(cov).min()
            scale = max(1.0, float(np.abs(cov).max()))
            if w_min < -PSD_NEG_TOL * scale:
                raise ValueError(f"covariance is not PSD (min eigenvalue {w_min:.3e})")
            if w_min < 0:
                cov = clip_psd(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class Ensemble:
    """Samples stored column-wise with the weights needed to recover moments."""

    samples: np.ndarray
    kind: Literal["random", "sigma"]
    mean_weights: np.ndarray
    cov_weights: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if samples.shape[1] == 0:
            raise ValueError("ensemble must contain at least one sample")
        if self.kind not in ("random", "sigma"):
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "mean_weights", np.asarray(self.mean_weights, dtype=float))
        object.__setattr__(self, "cov_weights", np.asarray(self.cov_weights, dtype=float))

    @property
    def dim(self) -> int:
        return self.samples.shape[0]

    @property
    def size(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> Ensemble:
        return Ensemble(samples, self.kind, self.mean_weights, self.cov_weights, self.seed)

    @classmethod
    def random(cls, samples: np.ndarray, seed: int | None = None) -> Ensemble:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n = samples.shape[1]
        if n < 2:
            raise ValueError("a random ensemble needs at least 2 members")
        return cls(samples, "random", np.full(n, 1.0 / n), np.full(n, 1.0 / (n - 1)), seed)


@dataclass(frozen=True)
class PriorMoments:
    sigma_xx: np.ndarray
    sigma_xy: np.ndarray
    sigma_yy: np.ndarray
    r_sensor: np.ndarray

    def __post_init__(self):
        sxx = symmetrize(np.atleast_2d(np.asarray(self.sigma_xx, dtype=float)))
        sxy = np.atleast_2d(np.asarray(self.sigma_xy, dtype=float))
        syy = symmetrize(np.atleast_2d(np.asarray(self.sigma_yy, dtype=float)))
        rs = symmetrize(np.atleast_2d(np.asarray(self.r_sensor, dtype=float)))
        n, m = sxx.shape[0], syy.shape[0]
        if sxx.shape != (n, n) or sxy.shape != (n, m) or syy.shape != (m, m) or rs.shape != (m, m):
            raise ValueError(
                f"inconsistent prior dimensions: sxx {sxx.shape}, sxy {sxy.shape}, syy {syy.shape}, r {rs.shape}"
            )
        object.__setattr__(self, "sigma_xx", sxx)
        object.__setattr__(self, "sigma_xy", sxy)
        object.__setattr__(self, "sigma_yy", syy)
        object.__setattr__(self, "r_sensor", rs)

    @property
    def state_dim(self) -> int:
        return self.sigma_xx.shape[0]

    @property
    def meas_dim(self) -> int:
        return self.sigma_yy.shape[0]

    def joint(self) -> np.ndarray:
        return np.block([[self.sigma_xx, self.sigma_xy], [self.sigma_xy.T, self.sigma_yy]])

    def is_valid_joint(self, tol: float = 1e-8) -> bool:
        joint = self.joint()
        scale = max(1.0, float(np.abs(joint).max()))
        return bool(np.linalg.eigvalsh(symmetrize(joint)).min() >= -tol * scale)

    @classmethod
    def linear(cls, sigma_xx, C, r_sensor=None) -> PriorMoments:
        """Prior blocks for a linear sensor y = C x."""
        sigma_xx = np.atleast_2d(np.asarray(sigma_xx, dtype=float))
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if r_sensor is None:
            r_sensor = np.zeros((C.shape[0], C.shape[0]))
        return cls(sigma_xx, sigma_xx @ C.T, C @ sigma_xx @ C.T, r_sensor)

    def with_sensor_noise(self, r_sensor) -> PriorMoments:
        return PriorMoments(self.sigma_xx, self.sigma_xy, self.sigma_yy, r_sensor)

    def restrict(self, state_idx, meas_idx=None) -> PriorMoments:
        state_idx = np.asarray(state_idx, dtype=int)
        meas_idx = np.arange(self.meas_dim) if meas_idx is None else np.asarray(meas_idx, dtype=int)
        return PriorMoments(
            self.sigma_xx[np.ix_(state_idx, state_idx)],
            self.sigma_xy[np.ix_(state_idx, meas_idx)],
            self.sigma_yy[np.ix_(meas_idx, meas_idx)],
            self.r_sensor[np.ix_(meas_idx, meas_idx)],
        )


# --- sampling --------------------------------------------------------------

def sample_ensemble(belief: GaussianBelief, n: int, seed: int) -> Ensemble:
    if n < 2:
        raise ValueError("an ensemble needs at least 2 members")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((belief.dim, n))
    samples = belief.mean[:, None] + sym_sqrt(belief.covariance) @ z
    return Ensemble.random(samples, seed=seed)


def sigma_points(belief: GaussianBelief, cfg: SigmaConfig = SigmaConfig()) -> Ensemble:
    n = belief.dim
    if n < 1:
        raise ValueError("sigma points need a state of dimension >= 1")
    rho = cfg.scaling(n)
    c = n + rho
    if c <= 0:
        raise ValueError(f"n + rho = {c} must be positive")
    root = np.sqrt(c) * sym_sqrt(belief.covariance)
    mu = belief.mean[:, None]
    samples = np.hstack([mu, mu + root, mu - root])
    wm = np.full(2 * n + 1, 1.0 / (2.0 * c))
    wc = wm.copy()
    wm[0] = rho / c
    wc[0] = rho / c + (1.0 - cfg.alpha**2 + cfg.beta)
    return Ensemble(samples, "sigma", wm, wc)


# --- moments ---------------------------------------------------------------

def _deviations(e: Ensemble, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and deviations of ``values`` (columns aligned with e).

    The mean is accumulated relative to the first column so that small
    spreads around large coordinates do not lose precision.
    """
    ref = values[:, :1]
    rel = values - ref
    shift = rel @ e.mean_weights
    return ref[:, 0] + shift, rel - shift[:, None]


def _weighted_outer(e: Ensemble, da: np.ndarray, db: np.ndarray) -> np.ndarray:
    if e.kind == "random":
        return (da @ db.T) / (e.size - 1)
    return (da * e.cov_weights) @ db.T


def centering_matrix(n: int) -> np.ndarray:
    """The random-ensemble weighting A = (I - 11'/N)(I - 11'/N) / (N - 1)."""
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    return j @ j / (n - 1)


def unscented_weight_matrix(e: Ensemble) -> np.ndarray:
    """Matrix W with covariance = X W X' for a sigma ensemble."""
    n = e.size
    lead = np.eye(n) - np.outer(e.mean_weights, np.ones(n))
    return lead @ np.diag(e.cov_weights) @ lead.T


def raw_moments(e: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance without any PSD check.

    Sigma ensembles with small alpha carry large weights of both signs, so the
    result can be indefinite at roundoff level; callers clip as needed.
    """
    mean, dev = _deviations(e, e.samples)
    return mean, symmetrize(_weighted_outer(e, dev, dev))


def ensemble_moments(e: Ensemble, clip: bool = True) -> GaussianBelief:
    mean, cov = raw_moments(e)
    if clip:
        cov = clip_psd(cov)
    return GaussianBelief(mean, cov)


def propagate_ensemble(e: Ensemble, dynamics: Callable[[np.ndarray], np.ndarray]) -> Ensemble:
    cols = []
    for i in range(e.size):
        try:
            cols.append(np.asarray(dynamics(e.samples[:, i].copy()), dtype=float).reshape(-1))
        except Exception as exc:
            raise PropagationError(i, exc) from exc
    return e.with_samples(np.column_stack(cols))


def _measure(e: Ensemble, h: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    ys = [np.atleast_1d(np.asarray(h(e.samples[:, i]), dtype=float)) for i in range(e.size)]
    dims = {y.shape for y in ys}
    if len(dims) != 1:
        raise ValueError(f"measurement map returned inconsistent shapes {sorted(dims)}")
    return np.column_stack(ys)


def cross_covariances(e: Ensemble, h: Callable[[np.ndarray], np.ndarray], r_sensor=None) -> PriorMoments:
    ys = _measure(e, h)
    _, dx = _deviations(e, e.samples)
    _, dy = _deviations(e, ys)
    sxx = clip_psd(_weighted_outer(e, dx, dx))
    sxy = _weighted_outer(e, dx, dy)
    syy = clip_psd(_weighted_outer(e, dy, dy))
    if r_sensor is None:
        r_sensor = np.zeros((ys.shape[0], ys.shape[0]))
    return PriorMoments(sxx, sxy, syy, r_sensor)


# --- updates ---------------------------------------------------------------

def _regularized(inner: np.ndarray) -> np.ndarray:
    inner = symmetrize(inner)
    if inner.size == 0:
        return inner
    if np.linalg.cond(inner) > REG_COND_LIMIT:
        m = inner.shape[0]
        inner = inner + REG_SCALE * (np.trace(inner) / m) * np.eye(m)
    return inner


def _solve_inner(inner: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    inner = _regularized(inner)
    try:
        out = np.linalg.solve(inner, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"innovation covariance is singular: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise NumericalError("innovation covariance inversion produced non-finite values")
    return out


def kalman_gain(pm: PriorMoments, r_data=None) -> np.ndarray:
    inner = pm.sigma_yy + pm.r_sensor
    if r_data is not None:
        inner = inner + np.atleast_2d(r_data)
    return _solve_inner(inner, pm.sigma_xy.T).T


def enkf_update(
    e: Ensemble,
    y,
    pm: PriorMoments,
    r_total,
    seed: int,
    h: Callable[[np.ndarray], np.ndarray] = lambda x: x,
) -> Ensemble:
    """Perturbed-observation update of every member.

    ``pm`` supplies Sxy and Syy; ``r_total`` is the full measurement noise
    (sensor plus any synthetic noise) and is also the perturbation covariance.
    """
    if e.kind != "random":
        raise ValueError("the perturbed-observation update applies to random ensembles")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r_total = symmetrize(np.atleast_2d(np.asarray(r_total, dtype=float)))
    gain = _solve_inner(pm.sigma_yy + r_total, pm.sigma_xy.T).T
    rng = np.random.default_rng(seed)
    eps = sym_sqrt(r_total) @ rng.standard_normal((y.size, e.size))
    innov = y[:, None] - _measure(e, h) + eps
    return e.with_samples(e.samples + gain @ innov)


def posterior_covariance(pm: PriorMoments, r_data=None) -> np.ndarray:
    """Sxx - Sxy (Syy + R_sensor + R_data)^-1 Sxy'."""
    inner = pm.sigma_yy + pm.r_sensor
    if r_data is not None:
        inner = inner + np.atleast_2d(np.asarray(r_data, dtype=float))
    correction = pm.sigma_xy @ _solve_inner(inner, pm.sigma_xy.T)
    return symmetrize(pm.sigma_xx - correction)


def posterior_covariance_from_precision(pm: PriorMoments, s_data) -> np.ndarray:
    """Posterior with synthetic noise given by its precision S = R_data^-1.

    Uses (Z + S^-1)^-1 = S^½ (S^½ Z S^½ + I)^-1 S^½ with Z = Syy + R_sensor,
    which stays finite when S is singular: a zero precision removes that
    measurement instead of requiring an infinite noise variance.
    """
    s_data = np.atleast_2d(np.asarray(s_data, dtype=float))
    if np.count_nonzero(s_data - np.diag(np.diag(s_data))) == 0:
        root = np.diag(np.sqrt(np.clip(np.diag(s_data), 0.0, None)))
    else:
        root = sym_sqrt(s_data)
    z = pm.sigma_yy + pm.r_sensor
    inner = root @ z @ root + np.eye(z.shape[0])
    # solve against the cross-covariance directly; forming the middle factor
    # first loses ~1e-3 absolute when Syy is ~1e7
    b = root @ pm.sigma_xy.T
    return symmetrize(pm.sigma_xx - b.T @ np.linalg.solve(symmetrize(inner), b))
