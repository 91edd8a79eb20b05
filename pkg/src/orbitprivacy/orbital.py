"""Orbit state representations, TLE ingestion and Cowell propagation.

Units are km, km/s, seconds and radians throughout. The gravity model is
two-body plus optional zonal harmonics J2..J4 evaluated in an inertial frame
whose z axis is aligned with the Earth's spin axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

MU_EARTH = 398600.4418
R_EARTH = 6378.137
J2 = 1.08262668e-3
J3 = -2.5327e-6
J4 = -1.6196e-6

_KEPLER_TOL = 1e-12
_KEPLER_MAX_ITER = 50
_DEGENERATE_TOL = 1e-12


class OrbitError(ValueError):
    """Base class for orbit-domain failures."""


class TLEParseError(OrbitError):
    def __init__(self, message: str, line: int, columns: tuple[int, int] | None = None):
        self.line = line
        self.columns = columns
        where = f"line {line}"
        if columns is not None:
            where += f", columns {columns[0]}-{columns[1]}"
        super().__init__(f"{where}: {message}")


class UnsupportedOrbitError(OrbitError):
    pass


class DegenerateOrbitError(OrbitError):
    pass


class ReentryError(OrbitError):
    def __init__(self, step: int, radius: float):
        self.step = step
        self.radius = radius
        super().__init__(f"state fell below the Earth's surface at step {step} (|r| = {radius:.3f} km)")


@dataclass(frozen=True)
class GravityModel:
    mu: float = MU_EARTH
    earth_radius: float = R_EARTH
    zonal_coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if len(self.zonal_coeffs) > 3:
            raise ValueError("at most three zonal coefficients (J2, J3, J4) are supported")
        object.__setattr__(self, "zonal_coeffs", tuple(float(c) for c in self.zonal_coeffs))

    @classmethod
    def two_body(cls) -> GravityModel:
        return cls()

    @classmethod
    def j4(cls) -> GravityModel:
        return cls(zonal_coeffs=(J2, J3, J4))


@dataclass(frozen=True)
class OrbitalElements:
    semi_major_axis: float
    eccentricity: float
    inclination: float
    raan: float
    arg_perigee: float
    true_anomaly: float

    def __post_init__(self):
        if not self.semi_major_axis > 0:
            raise ValueError("semi_major_axis must be positive")
        if not 0.0 <= self.eccentricity < 1.0:
            raise UnsupportedOrbitError(f"eccentricity {self.eccentricity} outside [0, 1)")
        if not 0.0 <= self.inclination <= math.pi:
            raise ValueError("inclination must lie in [0, pi]")
        for name in ("raan", "arg_perigee", "true_anomaly"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.semi_major_axis, self.eccentricity, self.inclination,
                         self.raan, self.arg_perigee, self.true_anomaly])


@dataclass(frozen=True)
class StateVector:
    position: np.ndarray
    velocity: np.ndarray
    epoch: float = 0.0

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(3)
        vel = np.array(self.velocity, dtype=float).reshape(3)
        pos.flags.writeable = False
        vel.flags.writeable = False
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_array(cls, x, epoch: float = 0.0) -> StateVector:
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:6], epoch)


def wrap_angle(angle: float) -> float:
    wrapped = math.fmod(angle, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod of a tiny negative value can round back up to 2*pi
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


def solve_kepler(mean_anomaly: float, eccentricity: float) -> float:
    """Eccentric anomaly from mean anomaly by Newton iteration (E0 = M)."""
    E = mean_anomaly
    for _ in range(_KEPLER_MAX_ITER):
        step = (E - eccentricity * math.sin(E) - mean_anomaly) / (1.0 - eccentricity * math.cos(E))
        E -= step
        if abs(step) < _KEPLER_TOL:
            return E
    raise OrbitError(f"Kepler's equation did not converge for M={mean_anomaly}, e={eccentricity}")


def mean_to_true_anomaly(mean_anomaly: float, eccentricity: float) -> float:
    E = solve_kepler(mean_anomaly, eccentricity)
    beta = math.sqrt(1.0 - eccentricity**2)
    return math.atan2(beta * math.sin(E), math.cos(E) - eccentricity)


def mean_motion_to_sma(rev_per_day: float, mu: float = MU_EARTH) -> float:
    n = rev_per_day * TWO_PI / 86400.0
    return (mu / n**2) ** (1.0 / 3.0)


def orbital_period(semi_major_axis: float, mu: float = MU_EARTH) -> float:
    return TWO_PI * math.sqrt(semi_major_axis**3 / mu)


# --- TLE -------------------------------------------------------------------

def _tle_checksum(line: str) -> int:
    total = 0
    for ch in line[:68]:
        if ch.isdigit():
            total += int(ch)
        elif ch == "-":
            total += 1
    return total % 10


def _tle_field(line: str, lineno: int, start: int, stop: int, implied_decimal: bool = False) -> float:
    # start/stop are 1-based inclusive columns as in the TLE format definition
    raw = line[start - 1:stop].strip()
    text = "0." + raw if implied_decimal else raw
    try:
        return float(text)
    except ValueError:
        raise TLEParseError(f"non-numeric field {raw!r}", lineno, (start, stop)) from None


def parse_tle(text: str, mu: float = MU_EARTH) -> OrbitalElements:
    """Parse a two-line element set (optional name line) into osculating-style elements.

    Only line 2 carries the element values; line 1 is checksum-validated. No SGP4
    theory is applied and the drag term is ignored.
    """
    lines = [ln.rstrip() for ln in text.strip("\n").splitlines() if ln.strip()]
    if len(lines) == 3:
        lines = lines[1:]
    if len(lines) != 2:
        raise TLEParseError(f"expected 2 element lines, found {len(lines)}", 0)
    for lineno, (line, tag) in enumerate(zip(lines, "12"), start=1):
        if len(line) != 69:
            raise TLEParseError(f"expected 69 characters, found {len(line)}", lineno)
        if line[0] != tag:
            raise TLEParseError(f"line must start with {tag!r}", lineno, (1, 1))
        if not line[68].isdigit():
            raise TLEParseError("checksum is not a digit", lineno, (69, 69))
        expected = _tle_checksum(line)
        if int(line[68]) != expected:
            raise TLEParseError(f"checksum mismatch (found {line[68]}, expected {expected})", lineno, (69, 69))

    l2 = lines[1]
    inc = math.radians(_tle_field(l2, 2, 9, 16))
    raan = math.radians(_tle_field(l2, 2, 18, 25))
    ecc = _tle_field(l2, 2, 27, 33, implied_decimal=True)
    argp = math.radians(_tle_field(l2, 2, 35, 42))
    mean_anom = math.radians(_tle_field(l2, 2, 44, 51))
    mean_motion = _tle_field(l2, 2, 53, 63)
    if mean_motion <= 0:
        raise TLEParseError("mean motion must be positive", 2, (53, 63))

    return OrbitalElements(
        semi_major_axis=mean_motion_to_sma(mean_motion, mu),
        eccentricity=ecc,
        inclination=inc,
        raan=raan,
        arg_perigee=argp,
        true_anomaly=mean_to_true_anomaly(mean_anom, ecc),
    )


# --- conversions -----------------------------------------------------------

def _rotation_pqw_to_eci(raan: float, inc: float, argp: float) -> np.ndarray:
    cO, sO = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    cw, sw = math.cos(argp), math.sin(argp)
    return np.array([
        [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
        [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
        [sw * si, cw * si, ci],
    ])


def kepler_to_cartesian(el: OrbitalElements, g: GravityModel = GravityModel()) -> StateVector:
    a, e, f = el.semi_major_axis, el.eccentricity, el.true_anomaly
    if e >= 1.0:
        raise UnsupportedOrbitError("only elliptical orbits are supported")
    p = a * (1.0 - e**2)
    r = p / (1.0 + e * math.cos(f))
    r_pqw = np.array([r * math.cos(f), r * math.sin(f), 0.0])
    vfac = math.sqrt(g.mu / p)
    v_pqw = np.array([-vfac * math.sin(f), vfac * (e + math.cos(f)), 0.0])
    rot = _rotation_pqw_to_eci(el.raan, el.inclination, el.arg_perigee)
    return StateVector(rot @ r_pqw, rot @ v_pqw)


def cartesian_to_kepler(sv: StateVector, g: GravityModel = GravityModel()) -> OrbitalElements:
    """Inverse of :func:`kepler_to_cartesian` on elliptical orbits.

    Circular orbits (e < 1e-12) report arg_perigee = 0 with the angle folded into
    the true anomaly; equatorial orbits (i < 1e-12) report raan = 0.
    """
    r_vec, v_vec = sv.position, sv.velocity
    mu = g.mu
    r = np.linalg.norm(r_vec)
    if r == 0.0:
        raise DegenerateOrbitError("zero position vector")
    h_vec = np.cross(r_vec, v_vec)
    h = np.linalg.norm(h_vec)
    if h <= _DEGENERATE_TOL * r * max(np.linalg.norm(v_vec), 1.0):
        raise DegenerateOrbitError("rectilinear orbit (angular momentum is zero)")

    v2 = float(v_vec @ v_vec)
    energy = v2 / 2.0 - mu / r
    if energy >= 0.0:
        raise UnsupportedOrbitError("orbit is not elliptical")
    a = -mu / (2.0 * energy)
    e_vec = ((v2 - mu / r) * r_vec - float(r_vec @ v_vec) * v_vec) / mu
    e = float(np.linalg.norm(e_vec))

    inc = math.acos(max(-1.0, min(1.0, h_vec[2] / h)))
    n_vec = np.array([-h_vec[1], h_vec[0], 0.0])
    n = float(np.linalg.norm(n_vec))
    equatorial = n < _DEGENERATE_TOL * h
    circular = e < _DEGENERATE_TOL

    # In-plane basis: x_hat is the node direction (or inertial x when equatorial)
    h_hat = h_vec / h
    if equatorial:
        raan = 0.0
        node_hat = np.array([1.0, 0.0, 0.0])
    else:
        raan = math.atan2(n_vec[1], n_vec[0])
        node_hat = n_vec / n
    y_hat = np.cross(h_hat, node_hat)

    def plane_angle(vec):
        return math.atan2(float(vec @ y_hat), float(vec @ node_hat))

    if circular:
        argp = 0.0
        f = plane_angle(r_vec)
        e = 0.0
    else:
        argp = plane_angle(e_vec)
        f = plane_angle(r_vec) - argp

    if equatorial and h_vec[2] < 0:
        inc = math.pi
    return OrbitalElements(a, e, inc, raan, argp, f)


# --- dynamics --------------------------------------------------------------

def acceleration(r, g: GravityModel = GravityModel()) -> np.ndarray:
    """Gravitational acceleration at position(s) ``r`` (shape (3,) or (3, N)).

    Attractive two-body term plus the gradient of each provided zonal term.
    """
    r = np.asarray(r, dtype=float)
    x, y, z = r[0], r[1], r[2]
    r2 = x * x + y * y + z * z
    if np.any(r2 == 0.0):
        raise OrbitError("acceleration is singular at the origin")
    rn = np.sqrt(r2)
    mu = g.mu
    acc = -(mu / (r2 * rn)) * r
    if not g.zonal_coeffs:
        return acc

    R = g.earth_radius
    zr2 = z * z / r2
    coeffs = list(g.zonal_coeffs) + [0.0] * (3 - len(g.zonal_coeffs))
    j2, j3, j4 = coeffs
    ax = np.zeros_like(x)
    ay = np.zeros_like(x)
    az = np.zeros_like(x)
    r5 = r2 * r2 * rn
    r7 = r5 * r2
    if j2:
        k = -1.5 * j2 * mu * R**2 / r5
        ax = ax + k * x * (1.0 - 5.0 * zr2)
        ay = ay + k * y * (1.0 - 5.0 * zr2)
        az = az + k * z * (3.0 - 5.0 * zr2)
    if j3:
        k = -2.5 * j3 * mu * R**3 / r7
        ax = ax + k * x * (3.0 * z - 7.0 * z * zr2)
        ay = ay + k * y * (3.0 * z - 7.0 * z * zr2)
        az = az + k * (6.0 * z * z - 7.0 * z * z * zr2 - 0.6 * r2)
    if j4:
        k = 1.875 * j4 * mu * R**4 / r7
        poly = 1.0 - 14.0 * zr2 + 21.0 * zr2 * zr2
        ax = ax + k * x * poly
        ay = ay + k * y * poly
        az = az + k * z * (5.0 - 70.0 / 3.0 * zr2 + 21.0 * zr2 * zr2)
    return acc + np.stack([ax, ay, az])


def gravity_potential(r, g: GravityModel = GravityModel()) -> float:
    """Scalar potential whose gradient is :func:`acceleration` (used as a test oracle)."""
    r = np.asarray(r, dtype=float)
    rn = float(np.linalg.norm(r))
    s = r[2] / rn
    legendre = {
        2: 0.5 * (3 * s**2 - 1),
        3: 0.5 * (5 * s**3 - 3 * s),
        4: (35 * s**4 - 30 * s**2 + 3) / 8.0,
    }
    total = 1.0
    for n, jn in zip((2, 3, 4), g.zonal_coeffs):
        total -= jn * (g.earth_radius / rn) ** n * legendre[n]
    return g.mu / rn * total


def _derivative(states: np.ndarray, g: GravityModel) -> np.ndarray:
    return np.concatenate([states[3:], acceleration(states[:3], g)])


def rk4_step(states: np.ndarray, dt: float, g: GravityModel) -> np.ndarray:
    k1 = _derivative(states, g)
    k2 = _derivative(states + 0.5 * dt * k1, g)
    k3 = _derivative(states + 0.5 * dt * k2, g)
    k4 = _derivative(states + dt * k3, g)
    return states + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def propagate_batch(states, dt: float, save_steps: Sequence[int], g: GravityModel) -> np.ndarray:
    """Integrate a (6, N) batch of states with fixed-step RK4.

    Returns an array of shape (len(save_steps), 6, N) holding the states at the
    requested step indices (which must be sorted and non-negative). Members are
    integrated independently; column order is preserved.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array(states, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    save_steps = [int(s) for s in save_steps]
    if any(b < a for a, b in zip(save_steps, save_steps[1:])) or (save_steps and save_steps[0] < 0):
        raise ValueError("save_steps must be sorted and non-negative")
    out = np.empty((len(save_steps), x.shape[0], x.shape[1]))
    floor = g.earth_radius
    step = 0
    for idx, target in enumerate(save_steps):
        while step < target:
            x = rk4_step(x, dt, g)
            step += 1
            radii = np.sqrt(np.sum(x[:3] ** 2, axis=0))
            if np.any(radii < floor):
                raise ReentryError(step, float(radii.min()))
        out[idx] = x
    return out


def propagate(sv: StateVector, dt: float, n_steps: int, g: GravityModel = GravityModel()) -> list[StateVector]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    traj = propagate_batch(sv.as_array()[:, None], dt, range(n_steps + 1), g)
    return [StateVector.from_array(traj[k, :, 0], sv.epoch + k * dt) for k in range(n_steps + 1)]


def specific_energy(sv: StateVector, mu: float = MU_EARTH) -> float:
    return 0.5 * float(sv.velocity @ sv.velocity) - mu / float(np.linalg.norm(sv.position))


def angular_momentum(sv: StateVector) -> np.ndarray:
    return np.cross(sv.position, sv.velocity)
