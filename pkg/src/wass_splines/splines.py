"""Closed-form spline energies and interpolants.

The phase-space segment cost c((x,v),(y,w)) is the integral of the squared
second derivative of the cubic matching those endpoint states on a unit
interval; rescaling to an interval of length delta multiplies the endpoint
velocities by delta and the energy by 1/delta^3.  Minimizing the summed
segment costs over the interior velocities reproduces the natural cubic
interpolant, which this module also constructs directly from the classical
second-derivative tridiagonal system; the two routes are kept independent so
they can check each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from .core import PhasePoint


def _tridiag_spd_solve(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """solveh_banded in upper form; LAPACK's ptsv rejects 1x1 systems."""
    if ab.shape[1] == 1:
        return rhs / ab[1, 0]
    return solveh_banded(ab, rhs)


def _as_points(points) -> np.ndarray:
    """Coerce knot data to shape (n, d); 1D scalars become (n, 1)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("points must be an (n, d) array or a 1D sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr


def hermite_energy(p: PhasePoint, q: PhasePoint) -> float:
    """Acceleration energy of the unit-interval cubic matching (x,v) and (y,w).

    Equals 12|x-y|^2 + 4(|v|^2 + |w|^2 + <v,w> + 3<v+w, x-y>); zero exactly
    for straight-line data y = x + v, w = v.
    """
    if p.dim != q.dim:
        raise ValueError(f"phase point dimension mismatch: {p.dim} vs {q.dim}")
    return segment_energy(p.x, p.v, q.x, q.v)


def segment_energy(x, v, y, w) -> float:
    """hermite_energy on raw coordinate arrays (broadcast over leading axes)."""
    x, v, y, w = (np.asarray(a, dtype=float) for a in (x, v, y, w))
    d = x - y
    out = 12.0 * np.sum(d * d, axis=-1) + 4.0 * (
        np.sum(v * v, axis=-1)
        + np.sum(w * w, axis=-1)
        + np.sum(v * w, axis=-1)
        + 3.0 * np.sum((v + w) * d, axis=-1)
    )
    return float(out) if np.ndim(out) == 0 else out


def scaled_segment_energy(p: PhasePoint, q: PhasePoint, delta: float) -> float:
    """Acceleration energy over an interval of length delta.

    Velocities are the physical endpoint velocities; the unit-interval scaling
    (v -> delta*v, energy -> energy/delta^3) is applied internally.
    """
    if not delta > 0:
        raise ValueError("interval length delta must be positive")
    if p.dim != q.dim:
        raise ValueError(f"phase point dimension mismatch: {p.dim} vs {q.dim}")
    return segment_energy(p.x, delta * p.v, q.x, delta * q.v) / delta**3


@dataclass(frozen=True)
class CubicPath:
    """Piecewise cubic through knots with prescribed knot velocities.

    Stores per-interval coefficients c0 + c1 s + c2 s^2 + c3 s^3 in the local
    variable s = t - t_i.  Evaluation outside [t_1, t_n] extends the boundary
    cubic (extension, not interpolation).
    """

    knot_times: np.ndarray
    knot_points: np.ndarray
    knot_velocities: np.ndarray
    coeffs: np.ndarray = None

    def __post_init__(self):
        t = np.asarray(self.knot_times, dtype=float).reshape(-1)
        x = _as_points(self.knot_points)
        v = _as_points(self.knot_velocities)
        if t.size < 2:
            raise ValueError("a cubic path needs at least 2 knots")
        if np.any(np.diff(t) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if x.shape != v.shape or x.shape[0] != t.size:
            raise ValueError("knot points/velocities must be (n, d) matching times")
        dt = np.diff(t)[:, None]
        dx = np.diff(x, axis=0)
        # Hermite coefficients per interval from endpoint states.
        c0 = x[:-1]
        c1 = v[:-1]
        c2 = (3.0 * dx / dt - 2.0 * v[:-1] - v[1:]) / dt
        c3 = (-2.0 * dx / dt + v[:-1] + v[1:]) / dt**2
        object.__setattr__(self, "knot_times", t)
        object.__setattr__(self, "knot_points", x)
        object.__setattr__(self, "knot_velocities", v)
        object.__setattr__(self, "coeffs", np.stack([c0, c1, c2, c3], axis=1))

    @property
    def dim(self) -> int:
        return self.knot_points.shape[1]

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        """Position and velocity at time t (scalar or array)."""
        t = np.asarray(t, dtype=float)
        seg = np.clip(np.searchsorted(self.knot_times, t, side="right") - 1,
                      0, len(self.knot_times) - 2)
        s = (t - self.knot_times[seg])[..., None]
        c0, c1, c2, c3 = (self.coeffs[seg, k] for k in range(4))
        pos = c0 + s * (c1 + s * (c2 + s * c3))
        vel = c1 + s * (2.0 * c2 + 3.0 * s * c3)
        return pos, vel

    def energy(self) -> float:
        """Integral of |x''|^2 over the knot span."""
        dt = np.diff(self.knot_times)
        c2 = self.coeffs[:, 2]
        c3 = self.coeffs[:, 3]
        per = (
            4.0 * np.sum(c2 * c2, axis=1) * dt
            + 12.0 * np.sum(c2 * c3, axis=1) * dt**2
            + 12.0 * np.sum(c3 * c3, axis=1) * dt**3
        )
        return float(per.sum())


def eval_path(path: CubicPath, t):
    """Position and first derivative of the piecewise cubic at time t."""
    return path.eval(t)


def fit_cubic_interpolant(times, points) -> CubicPath:
    """Natural cubic spline through the given knots.

    Solves the classical tridiagonal system for the knot second derivatives
    with free (zero) end curvature; for n = 2 this degenerates to the straight
    segment.
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    x = _as_points(points)
    if t.size < 2:
        raise ValueError("interpolation needs at least 2 knots")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing (no repeats)")
    if x.shape[0] != t.size:
        raise ValueError("one point per knot time required")
    n = t.size
    h = np.diff(t)
    m = np.zeros_like(x)  # second derivatives at knots, natural ends stay 0
    if n > 2:
        slope = np.diff(x, axis=0) / h[:, None]
        rhs = slope[1:] - slope[:-1]
        ab = np.zeros((2, n - 2))
        ab[1] = (h[:-1] + h[1:]) / 3.0
        ab[0, 1:] = h[1:-1] / 6.0
        m[1:-1] = _tridiag_spd_solve(ab, rhs)
    dx = np.diff(x, axis=0)
    vel = np.empty_like(x)
    vel[:-1] = dx / h[:, None] - h[:, None] * (2.0 * m[:-1] + m[1:]) / 6.0
    vel[-1] = dx[-1] / h[-1] + h[-1] * (2.0 * m[-1] + m[-2]) / 6.0
    return CubicPath(t, x, vel)


def minimize_knot_velocities(times, points) -> np.ndarray:
    """Velocities minimizing the summed scaled segment energies.

    The objective is strictly convex and quadratic in the velocities; the
    optimality conditions form a symmetric positive-definite tridiagonal
    system per coordinate, solved directly.
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    x = _as_points(points)
    if t.size < 2:
        raise ValueError("needs at least 2 knots")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing (no repeats)")
    if x.shape[0] != t.size:
        raise ValueError("one point per knot time required")
    n = t.size
    h = np.diff(t)
    ab = np.zeros((2, n))
    ab[1, :-1] += 8.0 / h
    ab[1, 1:] += 8.0 / h
    ab[0, 1:] = 4.0 / h
    slope12 = 12.0 * np.diff(x, axis=0) / (h**2)[:, None]
    rhs = np.zeros_like(x)
    rhs[:-1] += slope12
    rhs[1:] += slope12
    return _tridiag_spd_solve(ab, rhs)


def spline_cost(times, points) -> float:
    """Minimal acceleration energy of a curve through the knots.

    Computed by minimizing the separable phase-space segment costs over the
    knot velocities; agrees with fit_cubic_interpolant(...).energy().
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    x = _as_points(points)
    v = minimize_knot_velocities(t, x)
    h = np.diff(t)
    total = 0.0
    for i in range(t.size - 1):
        d = h[i]
        total += segment_energy(x[i], d * v[i], x[i + 1], d * v[i + 1]) / d**3
    return float(total)


def discrete_acceleration_cost(positions, dtau: float) -> float:
    """Sum over interior nodes of |x_{i+1} + x_{i-1} - 2 x_i|^2 / dtau^3."""
    x = _as_points(positions)
    if x.shape[0] < 3:
        raise ValueError("acceleration cost needs at least 3 positions")
    if not dtau > 0:
        raise ValueError("dtau must be positive")
    dd = x[2:] + x[:-2] - 2.0 * x[1:-1]
    return float(np.sum(dd * dd) / dtau**3)


def discrete_speed_cost(positions, dtau: float) -> float:
    """Sum over edges of |x_{i+1} - x_i|^2 / dtau."""
    x = _as_points(positions)
    if x.shape[0] < 2:
        raise ValueError("speed cost needs at least 2 positions")
    if not dtau > 0:
        raise ValueError("dtau must be positive")
    d = np.diff(x, axis=0)
    return float(np.sum(d * d) / dtau)


def extrapolation_cost(x1, x2, x3, lam: float) -> float:
    """Three-point extrapolation cost |x3 - 2x2 + x1|^2/lam^2 + |x2 - x1|^2/lam."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    a, b, c = (np.atleast_1d(np.asarray(p, dtype=float)) for p in (x1, x2, x3))
    dd = c - 2.0 * b + a
    d1 = b - a
    return float(np.sum(dd * dd) / lam**2 + np.sum(d1 * d1) / lam)
