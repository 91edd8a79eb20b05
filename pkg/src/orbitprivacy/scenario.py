"""Scenario files, the end-to-end pipeline and report files.

A scenario is a TOML file. Schema (unknown keys are rejected)::

    name = "iss_1orbit"            # optional
    mode = "precision"             # utility | privacy | utility_aware | privacy_aware | precision

    [orbit]
    tle = "..."                    # two-line element set (name line optional)
    # or: elements = {a = km, e = -, i = deg, raan = deg, argp = deg, f = deg}
    gravity = "j4"                 # j4 (default) | two_body

    [init_uncertainty]
    parameter = "a"                # a | e | i | raan | argp | f
    sigma_fraction = 0.01          # standard deviation as a fraction of the mean

    [filter.ukf]                   # or [filter.enkf] with n = 100, seed = 0
    alpha = 1e-3
    beta = 2.0
    kappa = 0.0

    [window]
    horizon = 6000.0               # s
    dt = 1.0
    save_every = 100               # diagnostic grid spacing in steps
    orbit_period = 6000.0          # s; scales every time_frac

    [sensors]
    times = [0, 1600, 1900, 3400, 5100]   # or time_fracs = [...]
    components = [0, 1, 2]
    noise_variance = 0.01          # km^2 per axis (default 0.01)

    [[utility]]                    # repeatable
    time = 900.0                   # or time_frac = 0.15
    components = [0, 1, 2]
    gamma = 1.0                    # km^2 bound on the trace

    [[privacy]]                    # repeatable
    time_frac = 0.82
    components = [0, 1, 2]
    fraction_of_prior = 1e-4       # or gamma = km^2 (ignored in utility_aware mode)

    [solver]
    tol = 1e-8
    eps = 1e-3
    max_iter = 50

Sites are the measurement times, numbered from 1 in time order.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata, resources
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .kalman import GaussianBelief, SigmaConfig, posterior_covariance_from_precision
from .lmi import DEFAULT_TOL
from .orbital import GravityModel, OrbitalElements, kepler_to_cartesian, parse_tle
from .synthesis import (
    PrivacyBound,
    SynthesisResult,
    TradeoffSpec,
    UtilityBound,
    max_noise_for_utility,
    min_noise_for_privacy,
    min_precision_for_utility,
    posterior_with_noise,
    spec_traces,
    privacy_aware_utility,
    utility_aware_privacy,
    verify_precision,
)
from .window import AugmentedWindow, EnKFSpec, OffGridError, UKFSpec, WindowConfig, WindowError, build_window, make_mask

MODES = ("utility", "privacy", "utility_aware", "privacy_aware", "precision")
_UTILITY_MODES = ("utility", "precision", "utility_aware")
_PRIVACY_MODES = ("privacy", "privacy_aware")
ELEMENT_KEYS = ("a", "e", "i", "raan", "argp", "f")
ANGLE_KEYS = ("i", "raan", "argp", "f")
DEFAULT_SENSOR_NOISE = 0.01
FIXTURES = ("iss_1orbit", "iss_5orbit")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


class ScenarioError(ValueError):
    """Schema or validation problem; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


@dataclass(frozen=True)
class Constraint:
    time: float
    components: tuple[int, ...]
    gamma: float | None = None
    fraction_of_prior: float | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    mode: str
    elements: OrbitalElements
    gravity: str
    uncertainty_parameter: str
    sigma_fraction: float
    filter_kind: str
    ukf: SigmaConfig
    enkf: EnKFSpec
    window: WindowConfig
    orbit_period: float
    sensor_components: tuple[int, ...]
    sensor_noise: float
    utility: tuple[Constraint, ...]
    privacy: tuple[Constraint, ...]
    tol: float = DEFAULT_TOL
    eps: float = 1e-3
    max_iter: int = 50
    defaults_applied: tuple[str, ...] = ()
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def sites(self) -> tuple[float, ...]:
        return self.window.meas_times

    @property
    def gravity_model(self) -> GravityModel:
        return GravityModel.j4() if self.gravity == "j4" else GravityModel.two_body()

    @property
    def filter_spec(self):
        return UKFSpec(self.ukf) if self.filter_kind == "ukf" else self.enkf

    @property
    def seed(self) -> int | None:
        return self.enkf.seed if self.filter_kind == "enkf" else None


# --- loading -------------------------------------------------------------------

def _check_keys(table: dict, allowed: set, where: str):
    if not isinstance(table, dict):
        raise ScenarioError(where, "expected a table")
    extra = sorted(set(table) - allowed)
    if extra:
        raise ScenarioError(f"{where}.{extra[0]}" if where else extra[0], "unknown key")


def _number(table: dict, key: str, where: str, default=None, *, positive=False, nonneg=False):
    if key not in table:
        if default is None:
            raise ScenarioError(f"{where}.{key}", "required")
        return default
    v = table[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"{where}.{key}", "must be a finite number")
    if positive and not v > 0:
        raise ScenarioError(f"{where}.{key}", "must be positive")
    if nonneg and v < 0:
        raise ScenarioError(f"{where}.{key}", "must be non-negative")
    return float(v)


def _components(table: dict, where: str, default=(0, 1, 2)) -> tuple[int, ...]:
    comps = table.get("components", list(default))
    if not isinstance(comps, list) or not comps or not all(isinstance(c, int) and 0 <= c < 6 for c in comps):
        raise ScenarioError(f"{where}.components", "must be a non-empty list of state indices 0-5")
    if len(set(comps)) != len(comps):
        raise ScenarioError(f"{where}.components", "duplicate component")
    return tuple(comps)


def _time(table: dict, where: str, period: float) -> float:
    if ("time" in table) == ("time_frac" in table):
        raise ScenarioError(where, "give exactly one of time or time_frac")
    if "time" in table:
        return _number(table, "time", where, nonneg=True)
    return _number(table, "time_frac", where, nonneg=True) * period


def _snap(t: float, dt: float) -> float:
    """Remove floating-point noise from fraction-derived times (still checked on the grid later)."""
    k = round(t / dt)
    return k * dt if abs(t / dt - k) <= 1e-6 else t


def _orbit(raw: dict) -> tuple[OrbitalElements, str]:
    _check_keys(raw, {"tle", "elements", "gravity"}, "orbit")
    gravity = raw.get("gravity", "j4")
    if gravity not in ("j4", "two_body"):
        raise ScenarioError("orbit.gravity", "must be 'j4' or 'two_body'")
    mu = GravityModel().mu
    if ("tle" in raw) == ("elements" in raw):
        raise ScenarioError("orbit", "give exactly one of tle or elements")
    if "tle" in raw:
        try:
            return parse_tle(raw["tle"], mu), gravity
        except ValueError as exc:
            raise ScenarioError("orbit.tle", str(exc)) from exc
    el = raw["elements"]
    _check_keys(el, set(ELEMENT_KEYS), "orbit.elements")
    vals = {k: _number(el, k, "orbit.elements") for k in ELEMENT_KEYS}
    for k in ANGLE_KEYS:
        vals[k] = math.radians(vals[k])
    try:
        return OrbitalElements(vals["a"], vals["e"], vals["i"], vals["raan"], vals["argp"], vals["f"]), gravity
    except ValueError as exc:
        raise ScenarioError("orbit.elements", str(exc)) from exc


def _filter(raw: dict, defaults: list) -> tuple[str, SigmaConfig, EnKFSpec]:
    _check_keys(raw, {"ukf", "enkf"}, "filter")
    if len(raw) != 1:
        raise ScenarioError("filter", "give exactly one of [filter.ukf] or [filter.enkf]")
    kind = next(iter(raw))
    table = raw[kind]
    if kind == "ukf":
        _check_keys(table, {"alpha", "beta", "kappa"}, "filter.ukf")
        for k in ("alpha", "beta", "kappa"):
            if k not in table:
                defaults.append(f"filter.ukf.{k}")
        base = SigmaConfig()
        cfg = SigmaConfig(_number(table, "alpha", "filter.ukf", base.alpha, positive=True),
                          _number(table, "beta", "filter.ukf", base.beta),
                          _number(table, "kappa", "filter.ukf", base.kappa))
        return kind, cfg, EnKFSpec()
    _check_keys(table, {"n", "seed"}, "filter.enkf")
    for k in ("n", "seed"):
        if k not in table:
            defaults.append(f"filter.enkf.{k}")
    n, seed = table.get("n", 100), table.get("seed", 0)
    if not isinstance(n, int) or n < 2:
        raise ScenarioError("filter.enkf.n", "must be an integer >= 2")
    if not isinstance(seed, int) or seed < 0:
        raise ScenarioError("filter.enkf.seed", "must be a non-negative integer")
    return kind, SigmaConfig(), EnKFSpec(n, seed)


def _constraints(items, kind: str, period: float, dt: float) -> tuple[Constraint, ...]:
    if not isinstance(items, list):
        raise ScenarioError(kind, "expected an array of tables")
    out = []
    for j, item in enumerate(items):
        where = f"{kind}[{j}]"
        _check_keys(item, {"time", "time_frac", "components", "gamma", "fraction_of_prior"}, where)
        t = _snap(_time(item, where, period), dt)
        comps = _components(item, where)
        gamma = _number(item, "gamma", where, positive=True) if "gamma" in item else None
        frac = None
        if "fraction_of_prior" in item:
            if kind == "utility":
                raise ScenarioError(f"{where}.fraction_of_prior", "only privacy bounds accept a fraction of the prior")
            frac = _number(item, "fraction_of_prior", where, positive=True)
            if frac > 1:
                raise ScenarioError(f"{where}.fraction_of_prior", "must lie in (0, 1]")
            if gamma is not None:
                raise ScenarioError(where, "give either gamma or fraction_of_prior")
        if kind == "utility" and gamma is None:
            raise ScenarioError(f"{where}.gamma", "required")
        out.append(Constraint(t, comps, gamma, frac))
    return tuple(out)


def parse_scenario(raw: dict, name: str = "scenario") -> Scenario:
    """Validate a parsed TOML document."""
    top = {"name", "mode", "orbit", "init_uncertainty", "filter", "window", "sensors", "utility", "privacy", "solver"}
    _check_keys(raw, top, "")
    defaults: list[str] = []
    if "mode" not in raw:
        raise ScenarioError("mode", "required")
    mode = raw["mode"]
    if mode not in MODES:
        raise ScenarioError("mode", f"must be one of {', '.join(MODES)}")
    for key in ("orbit", "init_uncertainty", "filter", "window", "sensors"):
        if key not in raw:
            raise ScenarioError(key, "required")
    elements, gravity = _orbit(raw["orbit"])
    if "gravity" not in raw["orbit"]:
        defaults.append("orbit.gravity")

    unc = raw["init_uncertainty"]
    _check_keys(unc, {"parameter", "sigma_fraction"}, "init_uncertainty")
    param = unc.get("parameter", "a")
    if "parameter" not in unc:
        defaults.append("init_uncertainty.parameter")
    if param not in ELEMENT_KEYS:
        raise ScenarioError("init_uncertainty.parameter", f"must be one of {', '.join(ELEMENT_KEYS)}")
    sigma_fraction = _number(unc, "sigma_fraction", "init_uncertainty", nonneg=True)

    kind, ukf, enkf = _filter(raw["filter"], defaults)

    win = raw["window"]
    _check_keys(win, {"horizon", "dt", "save_every", "orbit_period"}, "window")
    horizon = _number(win, "horizon", "window", nonneg=True)
    dt = _number(win, "dt", "window", 1.0, positive=True)
    save_every = win.get("save_every", 100)
    if not isinstance(save_every, int) or save_every < 1:
        raise ScenarioError("window.save_every", "must be a positive integer")
    period = _number(win, "orbit_period", "window", horizon if horizon > 0 else 1.0, positive=True)
    for k in ("dt", "save_every", "orbit_period"):
        if k not in win:
            defaults.append(f"window.{k}")

    sens = raw["sensors"]
    _check_keys(sens, {"times", "time_fracs", "components", "noise_variance"}, "sensors")
    if ("times" in sens) == ("time_fracs" in sens):
        raise ScenarioError("sensors", "give exactly one of times or time_fracs")
    values = sens.get("times", sens.get("time_fracs"))
    if not isinstance(values, list) or not values or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0 for v in values):
        raise ScenarioError("sensors.times", "must be a non-empty list of non-negative numbers")
    scale = 1.0 if "times" in sens else period
    times = tuple(_snap(float(v) * scale, dt) for v in values)
    if list(times) != sorted(set(times)):
        raise ScenarioError("sensors.times", "must be strictly increasing")
    comps = _components(sens, "sensors")
    if "noise_variance" not in sens:
        defaults.append("sensors.noise_variance")
    noise = _number(sens, "noise_variance", "sensors", DEFAULT_SENSOR_NOISE, nonneg=True)

    utility = _constraints(raw.get("utility", []), "utility", period, dt)
    privacy = _constraints(raw.get("privacy", []), "privacy", period, dt)
    if mode in ("utility", "precision", "utility_aware", "privacy_aware") and not utility:
        raise ScenarioError("utility", f"mode {mode} needs at least one utility bound")
    if mode in ("privacy", "utility_aware", "privacy_aware") and not privacy:
        raise ScenarioError("privacy", f"mode {mode} needs at least one privacy mask")
    if mode in ("privacy", "privacy_aware"):
        for j, c in enumerate(privacy):
            if c.gamma is None and c.fraction_of_prior is None:
                raise ScenarioError(f"privacy[{j}]", f"mode {mode} needs gamma or fraction_of_prior")

    solver = raw.get("solver", {})
    _check_keys(solver, {"tol", "eps", "max_iter"}, "solver")
    tol = _number(solver, "tol", "solver", DEFAULT_TOL, positive=True)
    eps = _number(solver, "eps", "solver", 1e-3, positive=True)
    max_iter = solver.get("max_iter", 50)
    if not isinstance(max_iter, int) or max_iter < 1:
        raise ScenarioError("solver.max_iter", "must be a positive integer")
    for k in ("tol", "eps", "max_iter"):
        if k not in solver:
            defaults.append(f"solver.{k}")

    extra = tuple(c.time for c in utility + privacy)
    try:
        cfg = WindowConfig(horizon, dt, save_every, times, (comps,), extra)
    except OffGridError as exc:
        raise ScenarioError("time", str(exc)) from exc
    except WindowError as exc:
        raise ScenarioError("window", str(exc)) from exc

    return Scenario(
        name=str(raw.get("name", name)), mode=mode, elements=elements, gravity=gravity,
        uncertainty_parameter=param, sigma_fraction=sigma_fraction, filter_kind=kind, ukf=ukf, enkf=enkf,
        window=cfg, orbit_period=period, sensor_components=comps, sensor_noise=noise,
        utility=utility, privacy=privacy, tol=tol, eps=eps, max_iter=int(max_iter),
        defaults_applied=tuple(defaults), source=raw,
    )


def fixture_path(name: str) -> Path:
    """Path of a shipped scenario (``iss_1orbit`` or ``iss_5orbit``)."""
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; shipped: {', '.join(FIXTURES)}")
    return Path(str(resources.files("orbitprivacy") / "scenarios" / f"{name}.toml"))


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists() and str(path) in FIXTURES:
        path = fixture_path(str(path))
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError("file", f"{path}: {exc}") from exc
    return parse_scenario(raw, path.stem)


def with_overrides(s: Scenario, *, mode=None, seed=None, filter_kind=None, tol=None) -> Scenario:
    changes: dict[str, Any] = {}
    if mode is not None:
        if mode not in MODES:
            raise ScenarioError("mode", f"must be one of {', '.join(MODES)}")
        changes["mode"] = mode
    if filter_kind is not None:
        changes["filter_kind"] = filter_kind
    if seed is not None:
        changes["enkf"] = EnKFSpec(s.enkf.n, int(seed))
    if tol is not None:
        changes["tol"] = float(tol)
    out = replace(s, **changes)
    if mode is not None:
        # re-run the mode-dependent checks
        raw = dict(s.source)
        raw["mode"] = mode
        parse_scenario(raw, s.name)
    return out


# --- pipeline ------------------------------------------------------------------

@dataclass
class RunReport:
    scenario: Scenario
    status: str
    message: str
    result: SynthesisResult | None
    baseline: SynthesisResult | None
    utility_traces: tuple[float, ...]
    privacy_traces: tuple[float, ...]
    utility_gammas: tuple[float | None, ...]
    privacy_gammas: tuple[float | None, ...]
    baseline_privacy: tuple[float, ...]
    improvement: tuple[float, ...]
    grid: np.ndarray
    posterior_sqrt: np.ndarray
    prior_sqrt: np.ndarray
    site_precision: np.ndarray
    site_noise: np.ndarray
    metadata: dict

    @property
    def exit_code(self) -> int:
        if self.status == "optimal":
            return EXIT_OK
        if self.status == "infeasible":
            return EXIT_INFEASIBLE
        return EXIT_ERROR

    def site_sums(self) -> list[float]:
        return [float(row.sum()) for row in self.site_precision]

    def summary(self) -> dict:
        s = self.scenario
        res = self.result
        return {
            "scenario": {
                "name": s.name, "mode": s.mode, "filter": s.filter_kind,
                "horizon_s": s.window.horizon, "orbit_period_s": s.orbit_period,
                "sites_s": list(s.sites), "sensor_components": list(s.sensor_components),
                "sensor_noise_km2": s.sensor_noise,
                "utility": [asdict(c) for c in s.utility], "privacy": [asdict(c) for c in s.privacy],
                "solver": {"tol": s.tol, "eps": s.eps, "max_iter": s.max_iter},
            },
            "status": self.status,
            "message": self.message,
            "sites": [
                {"site": i + 1, "time_s": t, "precision_sum": float(self.site_precision[i].sum()),
                 "precision": self.site_precision[i].tolist(),
                 "noise_variance": [_json_float(v) for v in self.site_noise[i]]}
                for i, t in enumerate(s.sites)
            ],
            "unnecessary_axes": list(res.unnecessary) if res is not None else [],
            "utility": [
                {"time_s": c.time, "gamma": g, "trace": t, "sqrt_trace": math.sqrt(max(t, 0.0))}
                for c, g, t in zip(s.utility, self.utility_gammas, self.utility_traces)
            ],
            "privacy": [
                {"time_s": c.time, "gamma": g, "trace": t, "sqrt_trace": math.sqrt(max(t, 0.0))}
                for c, g, t in zip(s.privacy, self.privacy_gammas, self.privacy_traces)
            ],
            "baseline_privacy_trace": list(self.baseline_privacy),
            "improvement_factor": list(self.improvement),
            "iterations": [asdict(r) | {"delta": _json_float(r.delta)} for r in (res.iterations if res else ())],
            "solver": _solver_summary(res.solver_stats) if res is not None else {},
            "metadata": self.metadata,
        }


def _json_float(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")


def _solver_summary(stats: dict) -> dict:
    keys = ("solver", "raw_status", "time", "iterations", "duality_gap", "polish_factor", "initial_precision")
    return {k: stats[k] for k in keys if k in stats and stats[k] is not None}


def _belief(s: Scenario) -> GaussianBelief:
    mean = s.elements.as_array()
    idx = ELEMENT_KEYS.index(s.uncertainty_parameter)
    cov = np.zeros((6, 6))
    cov[idx, idx] = (s.sigma_fraction * abs(mean[idx])) ** 2
    return GaussianBelief(mean, cov)


def build_scenario_window(s: Scenario) -> AugmentedWindow:
    g = s.gravity_model

    def to_state(v):
        return kepler_to_cartesian(OrbitalElements(*v), g).as_array()

    noise = np.eye(s.window.meas_dim) * s.sensor_noise
    return build_window(_belief(s), s.window, s.filter_spec, g, to_state=to_state, r_sensor=noise)


def _spec(s: Scenario, w: AugmentedWindow) -> TradeoffSpec:
    return TradeoffSpec(
        [UtilityBound(make_mask(w, c.time, c.components), c.gamma) for c in s.utility],
        [PrivacyBound(make_mask(w, c.time, c.components), c.gamma, c.fraction_of_prior) for c in s.privacy],
    )


def _synth_window(s: Scenario, full: AugmentedWindow) -> AugmentedWindow:
    """Restrict to the times and components that constraints and sensors touch."""
    times = sorted(set(s.sites) | {c.time for c in s.utility + s.privacy})
    comps = sorted(set(s.sensor_components).union(*[c.components for c in s.utility + s.privacy]))
    return full.restrict(times, comps)


def _dispatch(s: Scenario, mode: str, w: AugmentedWindow, spec: TradeoffSpec) -> SynthesisResult:
    pm, C = w.prior, w.meas_matrix
    if mode == "utility":
        return max_noise_for_utility(pm, TradeoffSpec(spec.utility), C=C, tol=s.tol)
    if mode == "privacy":
        return min_noise_for_privacy(pm, TradeoffSpec(privacy=spec.privacy), tol=s.tol)
    if mode == "precision":
        return min_precision_for_utility(pm, C, TradeoffSpec(spec.utility), tol=s.tol)
    if mode == "utility_aware":
        return utility_aware_privacy(pm, C, spec, eps=s.eps, max_iter=s.max_iter, tol=s.tol)
    return privacy_aware_utility(pm, C, spec, eps=s.eps, max_iter=s.max_iter, tol=s.tol)


def _precision_matrix(result: SynthesisResult | None, m: int) -> np.ndarray:
    """Oracle precision for a result; withheld axes get zero, noise-free axes a huge value."""
    if result is None or (result.s_data is None and result.r_data is None):
        return np.zeros((m, m))
    if result.s_data is not None:
        S = np.array(result.s_data, dtype=float)
        if np.all(np.isfinite(S)):
            return S
        d = np.diag(S)
        return np.diag(np.where(np.isinf(d), 1e15, d))
    R = np.array(result.r_data, dtype=float)
    d = np.diag(R)
    with np.errstate(divide="ignore"):
        return np.diag(np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1e15))


def _posterior(pm, result: SynthesisResult | None, S: np.ndarray, mode: str) -> np.ndarray:
    """Oracle posterior for a result.

    Noise designs are checked in noise form, so noise-free axes need no
    stand-in precision. Precision mode has no sensor noise to keep Syy + R
    invertible, so it stays in precision form.
    """
    if (mode != "precision" and result is not None and result.r_data is not None
            and result.status != "infeasible"):
        return posterior_with_noise(pm, result.r_data)
    return posterior_covariance_from_precision(pm, S)


def _sensor_prior(w: AugmentedWindow, mode: str):
    """Precision mode designs the sensor itself, so no separate sensor noise applies."""
    if mode == "precision":
        return w.prior.with_sensor_noise(np.zeros((w.meas_dim, w.meas_dim)))
    return w.prior


def _versions() -> dict:
    out = {}
    for pkg in ("orbitprivacy", "numpy", "cvxpy", "clarabel", "cvxopt"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            pass
    return out


def run(s: Scenario, out_dir=None, *, dump_problem: bool = False) -> RunReport:
    """Build the window, synthesize, verify and (if ``out_dir``) write the report files."""
    try:
        full = build_scenario_window(s)
    except Exception as exc:
        raise StageError("window", exc) from exc
    try:
        w = _synth_window(s, full)
        spec = _spec(s, w)
        result = _dispatch(s, s.mode, w, spec)
        baseline = None
        if s.mode == "utility_aware":
            baseline = _dispatch(s, "precision", w, spec)
    except Exception as exc:
        raise StageError("synthesis", exc) from exc

    m = w.meas_dim
    pm = _sensor_prior(w, s.mode)
    S = _precision_matrix(result, m)
    tr = spec_traces(_posterior(pm, result, S, s.mode), spec)
    # a gamma is reported only where the mode enforces it as a hard bound
    enforce_u = s.mode in _UTILITY_MODES
    enforce_p = s.mode in _PRIVACY_MODES
    utility_gammas = tuple(u.gamma if enforce_u else None for u in spec.utility)
    privacy_gammas = tuple(b.resolve(w.prior) if enforce_p else None for b in spec.privacy)
    base_priv: tuple[float, ...] = ()
    improvement: tuple[float, ...] = ()
    if baseline is not None and baseline.optimal:
        base_tr = verify_precision(_sensor_prior(w, "precision"), _precision_matrix(baseline, m), spec)
        base_priv = base_tr.privacy
        improvement = tuple(math.sqrt(a / b) if b > 0 else float("inf") for a, b in zip(tr.privacy, base_priv))

    # diagnostic posterior over the full saved grid (position block)
    full_pm = _sensor_prior(full, s.mode)
    post = _posterior(full_pm, result, S, s.mode)
    grid = np.array(full.saved_times)
    pos = [c for c in (0, 1, 2)]
    post_sqrt, prior_sqrt = [], []
    for t in grid:
        idx = [full.row(t, c) for c in pos]
        post_sqrt.append(math.sqrt(max(float(np.trace(post[np.ix_(idx, idx)])), 0.0)))
        prior_sqrt.append(math.sqrt(max(float(np.trace(full.prior.sigma_xx[np.ix_(idx, idx)])), 0.0)))

    ns = len(s.sites)
    k = len(s.sensor_components)
    prec = np.diag(S).reshape(ns, k) if result is not None and result.status != "infeasible" else np.zeros((ns, k))
    if result is not None and result.r_data is not None and result.status != "infeasible":
        noise = np.diag(np.array(result.r_data, dtype=float)).reshape(ns, k)
    else:
        with np.errstate(divide="ignore"):
            noise = np.where(prec > 0, 1.0 / np.where(prec > 0, prec, 1.0), np.inf)
    if s.mode == "precision":
        with np.errstate(divide="ignore"):
            noise = np.where(prec > 0, 1.0 / np.where(prec > 0, prec, 1.0), np.inf)

    meta = {
        "seed": s.seed,
        "filter": s.filter_kind,
        "versions": _versions(),
        "defaults_applied": list(s.defaults_applied),
        "sensor_noise_km2": s.sensor_noise,
        "sensor_noise_applies": s.mode != "precision",
        "synthesis_rows": [list(k) for k in w.row_keys],
        "augmented_dim_full": full.aug_dim,
        "augmented_dim_synthesis": w.aug_dim,
        "posterior_trace_block": "position (components 0-2)",
    }
    report = RunReport(
        scenario=s, status=result.status, message=result.message, result=result, baseline=baseline,
        utility_traces=tr.utility, privacy_traces=tr.privacy,
        utility_gammas=utility_gammas, privacy_gammas=privacy_gammas,
        baseline_privacy=base_priv, improvement=improvement, grid=grid,
        posterior_sqrt=np.array(post_sqrt), prior_sqrt=np.array(prior_sqrt),
        site_precision=prec, site_noise=noise, metadata=meta,
    )
    if out_dir is not None:
        try:
            write_reports(report, out_dir, dump_problem=dump_problem)
        except OSError as exc:
            raise StageError("report", exc) from exc
    return report


def _g(v: float) -> str:
    return f"{v:.17g}"


def write_reports(report: RunReport, out_dir, *, dump_problem: bool = False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = report.scenario
    with open(out / "precisions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "axis", "precision", "noise_variance"])
        for i in range(len(s.sites)):
            for j, c in enumerate(s.sensor_components):
                w.writerow([i + 1, c, _g(report.site_precision[i, j]), _g(report.site_noise[i, j])])
    with open(out / "posterior_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "sqrt_trace_km", "prior_sqrt_trace_km"])
        for t, a, b in zip(report.grid, report.posterior_sqrt, report.prior_sqrt):
            w.writerow([_g(t), _g(a), _g(b)])
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "gamma", "delta"])
        for rec in report.result.iterations if report.result is not None else ():
            w.writerow([rec.iteration, _g(rec.gamma), _g(rec.delta)])
    with open(out / "summary.json", "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=False)
        fh.write("\n")
    if dump_problem and report.result is not None and report.result.problem is not None:
        with open(out / "problem_dump.txt", "w") as fh:
            report.result.problem.dump(fh)


# --- command line ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for infeasible runs
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def main(argv=None) -> int:
    parser = _Parser(prog="orbitprivacy", description="Synthetic sensor noise design for orbit tracking.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write report files")
    r.add_argument("--scenario", required=True, help="scenario TOML file (or a shipped fixture name)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--seed", type=int)
    r.add_argument("--filter", choices=("enkf", "ukf"), dest="filter_kind")
    r.add_argument("--tol", type=float)
    r.add_argument("--dump-problem", action="store_true")
    sub.add_parser("fixtures", help="list shipped scenarios")
    args = parser.parse_args(argv)

    if args.command == "fixtures":
        for name in FIXTURES:
            print(f"{name}\t{fixture_path(name)}")
        return EXIT_OK
    try:
        s = with_overrides(load_scenario(args.scenario), mode=args.mode, seed=args.seed,
                           filter_kind=args.filter_kind, tol=args.tol)
        report = run(s, args.out, dump_problem=args.dump_problem)
    except (ScenarioError, StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"status: {report.status}")
    if report.message:
        print(report.message)
    for i, total in enumerate(report.site_sums(), start=1):
        print(f"site {i}: precision sum {total:.6g}")
    for c, t in zip(s.utility, report.utility_traces):
        print(f"utility  t={c.time:g} s: sqrt(trace) {math.sqrt(max(t, 0)):.6g} km")
    for c, t in zip(s.privacy, report.privacy_traces):
        print(f"privacy  t={c.time:g} s: sqrt(trace) {math.sqrt(max(t, 0)):.6g} km")
    for f in report.improvement:
        print(f"privacy improvement over the precision baseline: {f:.4g}")
    return report.exit_code
