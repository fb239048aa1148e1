"""Two-marginal entropic transport between weighted phase-space clouds.

The ground cost is the closed-form acceleration energy of the cubic joining
two phase points over a unit interval.  It is not a Riemannian cost: on
coincident points with equal nonzero velocity it equals 12|v|^2, not zero.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import WeightedPhaseCloud
from .mm_sinkhorn import KERNEL_FLOOR, SinkhornDivergence, SolveReport
from .splines import CubicPath


@dataclass(frozen=True)
class CouplingMatrix:
    """Nonnegative coupling weights with their prescribed marginals."""

    weights: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        a = np.asarray(self.row_marginal, dtype=float).reshape(-1)
        b = np.asarray(self.col_marginal, dtype=float).reshape(-1)
        if w.shape != (a.size, b.size):
            raise ValueError("coupling shape must be (len(row), len(col))")
        if np.any(w < 0):
            raise ValueError("coupling weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError(f"coupling mass {w.sum():.6g} is not 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "row_marginal", a)
        object.__setattr__(self, "col_marginal", b)

    def marginal_residual(self) -> float:
        ra = np.abs(self.weights.sum(axis=1) - self.row_marginal).max()
        rb = np.abs(self.weights.sum(axis=0) - self.col_marginal).max()
        return float(max(ra, rb))


def phase_cost_matrix(a: WeightedPhaseCloud, b: WeightedPhaseCloud) -> np.ndarray:
    """Pairwise phase-space segment costs, entry (i, j) for a_i matched to b_j."""
    if a.dim != b.dim:
        raise ValueError(f"cloud dimension mismatch: {a.dim} vs {b.dim}")
    dx = a.x[:, None, :] - b.x[None, :, :]
    v = a.v[:, None, :]
    w = b.v[None, :, :]
    return 12.0 * np.sum(dx * dx, axis=2) + 4.0 * (
        np.sum(v * v, axis=2)
        + np.sum(w * w, axis=2)
        + np.sum(v * w, axis=2)
        + 3.0 * np.sum((v + w) * dx, axis=2)
    )


def relative_epsilon(cost: np.ndarray, fraction: float = 1e-2) -> float:
    """Epsilon as a fraction of the median cost entry (floored for degenerate costs)."""
    med = float(np.median(cost))
    return max(med * fraction, 1e-12)


def sinkhorn_pairwise(cost: np.ndarray, alpha, beta, epsilon: float,
                      tol: float = 1e-7, max_iters: int = 5000,
                      log_domain: bool = False, check_every: int = 10,
                      verbose: bool = False):
    """Standard two-marginal scaling iterations on a dense cost matrix.

    Returns (CouplingMatrix, SolveReport); the coupling is
    diag(u) exp(-cost/epsilon) diag(v) with marginals alpha, beta.
    """
    t0 = time.perf_counter()
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    cost = np.asarray(cost, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if cost.shape != (alpha.size, beta.size):
        raise ValueError("cost shape must match the marginal sizes")
    report = SolveReport()
    residual = np.inf

    if log_domain:
        lk = -cost / epsilon
        la = np.log(alpha)
        lb = np.log(beta)
        f = np.zeros_like(alpha)
        g = np.zeros_like(beta)
        prev = g.copy()
        for it in range(1, max_iters + 1):
            f = la - logsumexp(lk + g[None, :], axis=1)
            g = lb - logsumexp(lk.T + f[None, :], axis=1)
            if np.any(~np.isfinite(f)) or np.any(~np.isfinite(g)):
                raise SinkhornDivergence(
                    "Sinkhorn diverged: increase epsilon or enable log-domain")
            if it % check_every == 0 or it == max_iters:
                residual = float(np.abs(g - prev).max())
                report.residual_history.append((it, residual))
                if verbose:
                    print(f"[sinkhorn-2m] iter {it:5d}  residual {residual:.3e}")
                if residual < tol:
                    report.converged = True
                    break
            prev = g.copy()
        plan = np.exp(lk + f[:, None] + g[None, :])
    else:
        k = np.maximum(np.exp(-cost / epsilon), KERNEL_FLOOR)
        u = np.ones_like(alpha)
        v = np.ones_like(beta)
        prev = np.zeros_like(beta)
        for it in range(1, max_iters + 1):
            u = alpha / (k @ v)
            v = beta / (k.T @ u)
            if np.any(~np.isfinite(u)) or np.any(~np.isfinite(v)):
                raise SinkhornDivergence(
                    "Sinkhorn diverged: increase epsilon or enable log-domain")
            if it % check_every == 0 or it == max_iters:
                with np.errstate(divide="ignore"):
                    cur = np.log(v)
                residual = float(np.abs(cur - prev).max())
                report.residual_history.append((it, residual))
                if verbose:
                    print(f"[sinkhorn-2m] iter {it:5d}  residual {residual:.3e}")
                if residual < tol:
                    report.converged = True
                    break
                prev = cur
            else:
                with np.errstate(divide="ignore"):
                    prev = np.log(v)
        plan = u[:, None] * k * v[None, :]

    report.iterations = it
    if not report.converged:
        report.message = f"max_iters reached (residual {residual:.3e})"
        warnings.warn(f"pairwise Sinkhorn stopped at {max_iters} iterations "
                      f"(residual {residual:.3e})")
    coupling = CouplingMatrix(plan, alpha, beta)
    report.marginal_residuals = {0: float(np.abs(plan.sum(axis=1) - alpha).sum()),
                                 1: float(np.abs(plan.sum(axis=0) - beta).sum())}
    report.wall_time_s = time.perf_counter() - t0
    return coupling, report


def entropic_objective(coupling: CouplingMatrix, cost: np.ndarray, epsilon: float) -> float:
    """<pi, C> + eps * sum pi log pi with the 0 log 0 = 0 convention."""
    p = coupling.weights
    pos = p > 0
    ent = float((p[pos] * np.log(p[pos])).sum())
    return float((p * cost).sum()) + epsilon * ent


def most_likely_map(coupling: CouplingMatrix) -> np.ndarray:
    """Per-row argmax of the coupling; ties break to the lowest column index."""
    return np.argmax(coupling.weights, axis=1)


def hermite_paths(a: WeightedPhaseCloud, b: WeightedPhaseCloud, mapping) -> list:
    """The matched clamped cubics: a_i at t=0 joined to b_{map(i)} at t=1."""
    mapping = np.asarray(mapping, dtype=int)
    if mapping.shape != (a.size,) or mapping.min() < 0 or mapping.max() >= b.size:
        raise ValueError("mapping must give one valid target index per source point")
    paths = []
    for i, j in enumerate(mapping):
        paths.append(CubicPath([0.0, 1.0],
                               np.stack([a.x[i], b.x[j]]),
                               np.stack([a.v[i], b.v[j]])))
    return paths
