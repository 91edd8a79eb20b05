"""Augmented batch model over a window of saved times.

The augmented state stacks the propagated state at every saved time
(time-major: row = time_index * state_dim + component). Measurements are
linear selections of state components at measurement times, so the prior
cross blocks follow from Sxx alone.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .kalman import (
    Ensemble,
    GaussianBelief,
    PriorMoments,
    PropagationError,
    SigmaConfig,
    clip_psd,
    raw_moments,
    sample_ensemble,
    sigma_points,
)
from .orbital import GravityModel, OrbitError, propagate_batch

TIME_TOL = 1e-6

# (states (d, N), saved step indices) -> array (n_saved, d, N)
Trajectory = Callable[[np.ndarray, Sequence[int]], np.ndarray]


class WindowError(ValueError):
    pass


class OffGridError(WindowError):
    def __init__(self, time: float, nearest: Sequence[float]):
        self.time = time
        self.nearest = list(nearest)
        super().__init__(f"time {time} s is not on the saved grid; nearest grid times: {self.nearest}")


@dataclass(frozen=True)
class EnKFSpec:
    n: int = 100
    seed: int = 0


@dataclass(frozen=True)
class UKFSpec:
    sigma: SigmaConfig = SigmaConfig()


FilterSpec = Union[EnKFSpec, UKFSpec]


@dataclass(frozen=True)
class WindowConfig:
    horizon: float
    dt: float = 1.0
    save_every: int = 100
    meas_times: tuple[float, ...] = ()
    meas_components: tuple[tuple[int, ...], ...] = ()
    extra_times: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dt <= 0:
            raise WindowError("dt must be positive")
        if self.horizon < 0:
            raise WindowError("horizon must be non-negative")
        if self.save_every < 1:
            raise WindowError("save_every must be >= 1")
        object.__setattr__(self, "meas_times", tuple(float(t) for t in self.meas_times))
        comps = tuple(tuple(int(c) for c in cs) for cs in self.meas_components)
        if len(comps) == 1 and len(self.meas_times) > 1:
            comps = comps * len(self.meas_times)
        if len(comps) != len(self.meas_times):
            raise WindowError("meas_components needs one component list per measurement time")
        object.__setattr__(self, "meas_components", comps)
        object.__setattr__(self, "extra_times", tuple(float(t) for t in self.extra_times))
        if list(self.meas_times) != sorted(self.meas_times):
            raise WindowError("meas_times must be sorted")
        block = self.dt * self.save_every
        ratio = self.horizon / block
        if abs(ratio - round(ratio)) > TIME_TOL:
            raise WindowError(f"horizon {self.horizon} is not divisible by dt*save_every = {block}")
        for t in self.meas_times + self.extra_times:
            self.step_of(t)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def step_of(self, t: float) -> int:
        k = t / self.dt
        if abs(k - round(k)) > TIME_TOL or t < -TIME_TOL or t > self.horizon + TIME_TOL:
            lo = max(0.0, np.floor(k) * self.dt)
            hi = min(self.horizon, np.ceil(k) * self.dt)
            raise OffGridError(t, sorted({lo, hi}))
        return int(round(k))

    def saved_steps(self) -> list[int]:
        grid = set(range(0, self.n_steps + 1, self.save_every))
        grid.update(self.step_of(t) for t in self.meas_times + self.extra_times)
        return sorted(grid)

    def saved_times(self) -> list[float]:
        return [k * self.dt for k in self.saved_steps()]

    @property
    def meas_dim(self) -> int:
        return sum(len(c) for c in self.meas_components)


@dataclass(frozen=True)
class SelectionMask:
    rows: tuple[tuple[int, int], ...]
    matrix: np.ndarray

    def __post_init__(self):
        if len(set(self.rows)) != len(self.rows):
            raise WindowError("selection rows must be distinct")

    @property
    def size(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class AugmentedWindow:
    saved_times: tuple[float, ...]
    state_dim: int
    meas_matrix: np.ndarray
    prior: PriorMoments
    mean: np.ndarray
    meas_rows: tuple[tuple[float, int], ...]
    row_keys: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        if not self.row_keys:
            keys = tuple((t, c) for t in self.saved_times for c in range(self.state_dim))
            object.__setattr__(self, "row_keys", keys)

    @property
    def aug_dim(self) -> int:
        return len(self.row_keys)

    @property
    def meas_dim(self) -> int:
        return self.meas_matrix.shape[0]

    def time_index(self, t: float) -> int:
        times = self.saved_times
        i = bisect.bisect_left(times, t - TIME_TOL)
        if i < len(times) and abs(times[i] - t) <= TIME_TOL:
            return i
        nearest = [times[j] for j in (i - 1, i) if 0 <= j < len(times)]
        raise OffGridError(t, nearest)

    def row(self, t: float, component: int) -> int:
        key = (self.saved_times[self.time_index(t)], int(component))
        try:
            return self.row_keys.index(key)
        except ValueError:
            raise WindowError(f"component {component} at t={t} is not part of this window") from None

    def restrict(self, times: Sequence[float], components: Sequence[int]) -> AugmentedWindow:
        """Sub-window keeping only ``components`` at ``times``.

        Every measured (time, component) must survive the restriction; the
        posterior of the kept rows is unchanged because the measurements are
        linear in them.
        """
        times = sorted({self.saved_times[self.time_index(t)] for t in times})
        keys = [(t, int(c)) for t in times for c in components]
        idx = [self.row(t, c) for t, c in keys]
        col_of = {k: j for j, k in enumerate(keys)}
        C = np.zeros((self.meas_dim, len(keys)))
        for i, (t, c) in enumerate(self.meas_rows):
            key = (self.saved_times[self.time_index(t)], c)
            if key not in col_of:
                raise WindowError(f"restriction drops measured component {c} at t={t}")
            C[i, col_of[key]] = 1.0
        sxx = self.prior.sigma_xx[np.ix_(idx, idx)]
        prior = PriorMoments.linear(sxx, C, self.prior.r_sensor)
        return AugmentedWindow(tuple(times), self.state_dim, C, prior, self.mean[idx], self.meas_rows, tuple(keys))

    def with_sensor_noise(self, r_sensor) -> AugmentedWindow:
        return AugmentedWindow(self.saved_times, self.state_dim, self.meas_matrix,
                               self.prior.with_sensor_noise(r_sensor), self.mean, self.meas_rows, self.row_keys)


def _default_trajectory(g: GravityModel, dt: float) -> Trajectory:
    def run(states: np.ndarray, steps: Sequence[int]) -> np.ndarray:
        return propagate_batch(states, dt, steps, g)
    return run


def _members(init: GaussianBelief, filter_spec: FilterSpec) -> Ensemble:
    if isinstance(filter_spec, EnKFSpec):
        return sample_ensemble(init, filter_spec.n, filter_spec.seed)
    if isinstance(filter_spec, UKFSpec):
        return sigma_points(init, filter_spec.sigma)
    raise TypeError(f"unknown filter spec {filter_spec!r}")


def measurement_matrix(cfg: WindowConfig, saved_times: Sequence[float], state_dim: int):
    rows = []
    positions = {t: i for i, t in enumerate(saved_times)}
    C = np.zeros((cfg.meas_dim, len(saved_times) * state_dim))
    r = 0
    for t, comps in zip(cfg.meas_times, cfg.meas_components):
        ti = positions[cfg.step_of(t) * cfg.dt]
        for c in comps:
            if not 0 <= c < state_dim:
                raise WindowError(f"component {c} outside state of dimension {state_dim}")
            C[r, ti * state_dim + c] = 1.0
            rows.append((float(t), c))
            r += 1
    return C, tuple(rows)


def build_window(
    init: GaussianBelief,
    cfg: WindowConfig,
    filter_spec: FilterSpec,
    g: GravityModel = GravityModel(),
    *,
    to_state: Callable[[np.ndarray], np.ndarray] | None = None,
    trajectory: Trajectory | None = None,
    r_sensor=None,
) -> AugmentedWindow:
    """Propagate the initial uncertainty over the window and form the augmented prior.

    ``to_state`` maps a sampled vector to the propagation state (for example
    Keplerian elements to Cartesian); it is applied member by member before
    propagation. No measurement updates happen inside the window.
    """
    members = _members(init, filter_spec)
    if to_state is not None:
        cols = []
        for i in range(members.size):
            try:
                cols.append(np.asarray(to_state(members.samples[:, i]), dtype=float))
            except Exception as exc:
                raise PropagationError(i, exc) from exc
        members = members.with_samples(np.column_stack(cols))
    d = members.dim
    steps = cfg.saved_steps()
    run = trajectory if trajectory is not None else _default_trajectory(g, cfg.dt)
    try:
        traj = run(members.samples, steps)
    except PropagationError:
        raise
    except OrbitError as exc:
        # batch integration cannot tell which member failed; find it
        for i in range(members.size):
            try:
                run(members.samples[:, i:i + 1], steps)
            except OrbitError as inner:
                raise PropagationError(i, inner) from exc
        raise
    saved_times = tuple(k * cfg.dt for k in steps)
    stacked = np.asarray(traj).reshape(len(steps) * d, members.size)
    mean, cov = raw_moments(members.with_samples(stacked))
    sxx = clip_psd(cov)
    C, rows = measurement_matrix(cfg, saved_times, d)
    if r_sensor is None:
        r_sensor = np.zeros((C.shape[0], C.shape[0]))
    prior = PriorMoments.linear(sxx, C, r_sensor)
    return AugmentedWindow(saved_times, d, C, prior, mean, rows)


def make_mask(window: AugmentedWindow, time: float, components: Sequence[int]) -> SelectionMask:
    t = window.saved_times[window.time_index(time)]
    ti = window.time_index(time)
    cols = [window.row(t, c) for c in components]
    M = np.zeros((len(cols), window.aug_dim))
    M[np.arange(len(cols)), cols] = 1.0
    return SelectionMask(tuple((ti, int(c)) for c in components), M)


def sensor_noise_block(cfg: WindowConfig, per_sensor_variances) -> np.ndarray:
    """Block-diagonal sensor noise in measurement order (time-major).

    Accepts a flat sequence with one variance per sensed component per
    measurement time, a nested per-time sequence, or a scalar applied to
    every axis.
    """
    if np.isscalar(per_sensor_variances):
        flat = np.full(cfg.meas_dim, float(per_sensor_variances))
    else:
        items = list(per_sensor_variances)
        if items and not np.isscalar(items[0]):
            if len(items) != len(cfg.meas_times):
                raise WindowError("need one variance list per measurement time")
            for vs, comps in zip(items, cfg.meas_components):
                if len(vs) != len(comps):
                    raise WindowError("variance list length does not match sensed components")
            flat = np.array([v for vs in items for v in vs], dtype=float)
        else:
            flat = np.asarray(items, dtype=float)
    if flat.size != cfg.meas_dim:
        raise WindowError(f"expected {cfg.meas_dim} variances, got {flat.size}")
    if np.any(flat < 0):
        raise WindowError("sensor variances must be non-negative")
    return np.diag(flat)
