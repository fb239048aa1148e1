"""Independent reference computations used by the test suite.

These deliberately avoid the code paths they are checking: quadrature instead
of closed forms, dense finite-difference quadratic programming instead of
tridiagonal spline systems, and full-tensor enumeration instead of factorized
message passing.
"""
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve


def hermite_quadrature_energy(x, v, y, w, n_quad=8):
    """Gauss-Legendre quadrature of |p''|^2 for the unit-interval Hermite cubic.

    The integrand is a quadratic polynomial in t, so any rule with >= 2 nodes
    is exact up to rounding.
    """
    x, v, y, w = (np.atleast_1d(np.asarray(a, float)) for a in (x, v, y, w))
    dx = y - x
    c2 = 3.0 * dx - 2.0 * v - w
    c3 = -2.0 * dx + v + w
    t, wt = np.polynomial.legendre.leggauss(n_quad)
    t = 0.5 * (t + 1.0)  # map to [0, 1]
    acc = 2.0 * c2[None, :] + 6.0 * t[:, None] * c3[None, :]
    return 0.5 * float(wt @ np.sum(acc * acc, axis=1))


def hermite_quadrature_energy_interval(x, v, y, w, delta, n_quad=8):
    """Quadrature of |q''|^2 for the cubic on [0, delta] with physical velocities."""
    x, v, y, w = (np.atleast_1d(np.asarray(a, float)) for a in (x, v, y, w))
    dx = y - x
    # cubic q(t) = x + v t + b2 t^2 + b3 t^3 fitted on [0, delta]
    b2 = (3.0 * dx / delta**2) - (2.0 * v + w) / delta
    b3 = (-2.0 * dx / delta**3) + (v + w) / delta**2
    t, wt = np.polynomial.legendre.leggauss(n_quad)
    t = 0.5 * delta * (t + 1.0)
    acc = 2.0 * b2[None, :] + 6.0 * t[:, None] * b3[None, :]
    return 0.5 * delta * float(wt @ np.sum(acc * acc, axis=1))


def qp_spline_energy(times, points, samples_per_unit=2000):
    """Minimal discrete acceleration energy of a dense path pinned at the knots.

    Minimizes sum |x_{i+1} + x_{i-1} - 2 x_i|^2 / dt^3 over a uniform dense
    path subject to equality constraints at the knot indices, by eliminating
    the pinned entries from the sparse normal equations.
    """
    times = np.asarray(times, float)
    points = np.asarray(points, float)
    if points.ndim == 1:
        points = points[:, None]
    span = times[-1] - times[0]
    m = int(round(span * samples_per_unit))
    dt = span / m
    # knot indices must land exactly on the dense grid
    kidx = np.round((times - times[0]) / dt).astype(int)
    assert np.allclose(times[0] + kidx * dt, times, atol=1e-9)
    n = m + 1
    d2 = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n))
    quad = (d2.T @ d2) / dt**3
    free = np.setdiff1d(np.arange(n), kidx)
    a_ff = quad[free][:, free].tocsc()
    a_fc = quad[free][:, kidx]
    energy = 0.0
    for c in range(points.shape[1]):
        xc = points[:, c]
        xf = spsolve(a_ff, -a_fc @ xc)
        full = np.empty(n)
        full[free] = xf
        full[kidx] = xc
        dd = full[2:] + full[:-2] - 2.0 * full[1:-1]
        energy += float(np.sum(dd * dd) / dt**3)
    return energy
