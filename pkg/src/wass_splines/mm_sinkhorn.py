"""Entropically regularized multimarginal transport on grids with chain costs.

The joint plan over N time steps never materializes: the Gibbs kernel of the
acceleration cost factorizes into one identical 3-point stencil tensor per
interior step and, on Cartesian grids, further into one factor per spatial
dimension.  All contractions run as forward/backward message passing over
pair states (x_{i-1}, x_i); one full Gauss-Seidel sweep over the constrained
potentials costs O(N nx^3) in 1D and O(N nx^5) with the per-dimension
splitting in 2D (never materializing nx^6 intermediates).  The speed cost is
a 2-point stencil with single-state messages.

A dense enumeration oracle solving the identical fixed point on the full
plan tensor is provided for small instances; every factorized quantity is
tested against it.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import DensityGrid, Grid, TimeGrid

KERNEL_FLOOR = 1e-300
PAIR_BUDGET = 20_000_000  # entries allowed in a pinned-propagation tensor


class SinkhornDivergence(RuntimeError):
    """Raised when scaling iterations produce non-finite potentials."""


@dataclass
class SolveReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)  # (sweep, residual)
    marginal_residuals: dict = field(default_factory=dict)  # step -> L1 error
    converged: bool = False
    wall_time_s: float = 0.0
    message: str = ""


@dataclass(frozen=True)
class ChainKernel:
    """Per-dimension Gibbs factors of a chain-structured cost.

    With uniform time step and one Cartesian grid shared by all steps, every
    interior stencil produces the same factor tensor, so a single (nx, nx, nx)
    tensor per spatial dimension represents the whole kernel (for the speed
    cost, an (nx, nx) pair factor per dimension).  `cost_factors` holds the
    matching raw stencil costs, used for plan-cost read-outs.
    """

    grid: Grid
    timegrid: TimeGrid
    epsilon: float
    cost_kind: str
    lam: float = None
    factors: tuple = None
    log_factors: tuple = None
    cost_factors: tuple = None

    @property
    def stencil(self) -> int:
        return 2 if self.cost_kind == "speed" else 3

    @property
    def n_steps(self) -> int:
        return self.timegrid.n_steps


def build_chain_kernel(grid: Grid, timegrid: TimeGrid, epsilon: float,
                       cost_kind: str, lam: float = None) -> ChainKernel:
    """Build the per-dimension Gibbs factors exp(-stencil cost / epsilon).

    Entries below the underflow floor are clamped to it (positivity is needed
    by the scaling division); if even the smallest positive stencil cost
    underflows, the kernel is numerically diagonal and an error is raised.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if cost_kind not in ("acceleration", "speed", "extrapolation"):
        raise ValueError(f"unknown cost kind {cost_kind!r}")
    if cost_kind == "acceleration" and timegrid.n_steps < 3:
        raise ValueError("acceleration cost needs at least 3 time steps")
    if cost_kind == "extrapolation":
        if timegrid.n_steps != 3:
            raise ValueError("extrapolation is a 3-marginal problem")
        if lam is None or not lam > 0:
            raise ValueError("extrapolation needs lambda > 0")
    dtau = timegrid.dtau
    idx = np.arange(grid.nx, dtype=float)
    costs = []
    # index-space stencils scaled by h: analytic zeros stay exact zeros
    for h in grid.h:
        if cost_kind == "acceleration":
            dd = (idx[None, None, :] + idx[:, None, None] - 2.0 * idx[None, :, None]) * h
            costs.append(dd**2 / dtau**3)
        elif cost_kind == "speed":
            d1 = (idx[None, :] - idx[:, None]) * h
            costs.append(d1**2 / dtau)
        else:
            dd = (idx[None, None, :] + idx[:, None, None] - 2.0 * idx[None, :, None]) * h
            d1 = ((idx[None, :, None] - idx[:, None, None]) * h
                  * np.ones_like(idx)[None, None, :])
            costs.append(dd**2 / lam**2 + d1**2 / lam)
    min_pos = min(c[c > 0].min() for c in costs)
    if np.exp(-min_pos / epsilon) == 0.0:
        raise ValueError("epsilon too small for grid resolution")
    log_factors = tuple(-c / epsilon for c in costs)
    factors = tuple(np.maximum(np.exp(lf), KERNEL_FLOOR) for lf in log_factors)
    return ChainKernel(grid, timegrid, float(epsilon), cost_kind,
                       None if lam is None else float(lam),
                       factors, log_factors, tuple(costs))


@dataclass
class PotentialSet:
    """Converged scaling potentials plus the cached message chains.

    `u` holds one array per time step (all-ones where unconstrained, the
    exponentiated dual variable at constrained steps).  Forward messages
    F[i] cover everything strictly before step i; backward messages B[i]
    everything strictly after step i (3-point: over pair states).
    """

    kernel: ChainKernel
    u: list
    potentials: dict
    fwd: list = None
    bwd: list = None
    log_domain: bool = False


# ---------------------------------------------------------------------------
# plain-domain contractions (batched matmul, no nx^(3 dim) intermediates)
# ---------------------------------------------------------------------------

def _fwd3_1d(fu, k3):
    # out[b,c] = sum_a fu[a,b] k3[a,b,c]
    return np.matmul(fu.T[:, None, :], k3.transpose(1, 0, 2))[:, 0, :]


def _bwd3_1d(k3, b):
    # out[a,b] = sum_c k3[a,b,c] b[b,c]
    return np.matmul(k3.transpose(1, 0, 2), b[:, :, None])[:, :, 0].T


def _fwd3_2d(fu, ka, kb):
    n = fu.shape[0]
    t = fu.transpose(2, 1, 3, 0).reshape(n, n * n, n)      # (c, b*d, a)
    h = np.matmul(t, ka.transpose(1, 0, 2))                # (c, b*d, e)
    h = h.reshape(n, n, n, n).transpose(1, 0, 2, 3)        # (b, c, d, e)
    t = h.transpose(2, 1, 3, 0).reshape(n, n * n, n)       # (d, c*e, b)
    g = np.matmul(t, kb.transpose(1, 0, 2))                # (d, c*e, f)
    return g.reshape(n, n, n, n).transpose(1, 0, 2, 3)     # (c, d, e, f)


def _bwd3_2d(ka, kb, b):
    n = b.shape[0]
    t = b.transpose(1, 0, 2, 3).reshape(n, n * n, n)       # (d, c*e, f)
    h = np.matmul(t, kb.transpose(1, 2, 0))                # (d, c*e, b)
    h = h.reshape(n, n, n, n).transpose(3, 1, 0, 2)        # (b, c, d, e)
    t = h.transpose(1, 0, 2, 3).reshape(n, n * n, n)       # (c, b*d, e)
    g = np.matmul(t, ka.transpose(1, 2, 0))                # (c, b*d, a)
    return g.reshape(n, n, n, n).transpose(3, 1, 0, 2)     # (a, b, c, d)


# ---------------------------------------------------------------------------
# log-domain contractions (log-sum-exp; 2D ones stream over the new axis)
# ---------------------------------------------------------------------------

def _fwd3_1d_log(fu, k3):
    return logsumexp(fu[:, :, None] + k3, axis=0)


def _bwd3_1d_log(k3, b):
    return logsumexp(k3 + b[None, :, :], axis=2)


def _fwd3_2d_log(fu, ka, kb):
    n = fu.shape[0]
    h = np.empty_like(fu)  # (b,c,d,e) = lse_a fu[a,b,c,d] + ka[a,c,e]
    for e in range(n):
        h[:, :, :, e] = logsumexp(fu + ka[:, None, :, None, e], axis=0)
    g = np.empty_like(fu)  # (c,d,e,f) = lse_b h[b,c,d,e] + kb[b,d,f]
    for f in range(n):
        g[:, :, :, f] = logsumexp(h + kb[:, None, :, None, f], axis=0)
    return g


def _bwd3_2d_log(ka, kb, b):
    n = b.shape[0]
    h = np.empty_like(b)  # (b,c,d,e) = lse_f B[c,d,e,f] + kb[b,d,f]
    for bb in range(n):
        h[bb] = logsumexp(b + kb[bb, None, :, None, :], axis=3)
    g = np.empty_like(b)  # (a,b,c,d) = lse_e h[b,c,d,e] + ka[a,c,e]
    for a in range(n):
        g[a] = logsumexp(h + ka[a, None, :, None, :], axis=3)
    return g


def _norm_msg(m, log):
    """Rescale a message to a unit maximum; overall scale is gauge freedom."""
    if log:
        top = m.max()
        if not np.isfinite(top):
            raise SinkhornDivergence(
                "Sinkhorn diverged: increase epsilon or enable log-domain")
        return m - top
    top = m.max()
    if not np.isfinite(top) or top <= 0.0:
        raise SinkhornDivergence(
            "Sinkhorn diverged: increase epsilon or enable log-domain")
    return m / top


class _Chain:
    """Message-passing engine bound to one kernel (plain or log domain)."""

    def __init__(self, kernel: ChainKernel, log: bool):
        self.kernel = kernel
        self.log = log
        self.dim = kernel.grid.dim
        self.n = kernel.timegrid.n_steps
        self.shape = kernel.grid.shape
        self.K = kernel.log_factors if log else kernel.factors

    def ones(self):
        return np.zeros(self.shape) if self.log else np.ones(self.shape)

    def mul(self, a, b):
        return a + b if self.log else a * b

    # -- 3-point stencil over pair states ---------------------------------
    def f_init(self, u0):
        pair_shape = self.shape * 2
        if self.dim == 1:
            return np.broadcast_to(u0[:, None], pair_shape).copy()
        return np.broadcast_to(u0[:, :, None, None], pair_shape).copy()

    def b_init(self, ulast):
        pair_shape = self.shape * 2
        if self.dim == 1:
            return np.broadcast_to(ulast[None, :], pair_shape).copy()
        return np.broadcast_to(ulast[None, None, :, :], pair_shape).copy()

    def f_step(self, f, u):
        fu = self.mul(f, u[None, :] if self.dim == 1 else u[None, None, :, :])
        if self.dim == 1:
            return _fwd3_1d_log(fu, self.K[0]) if self.log else _fwd3_1d(fu, self.K[0])
        if self.log:
            return _fwd3_2d_log(fu, self.K[0], self.K[1])
        return _fwd3_2d(fu, self.K[0], self.K[1])

    def b_step(self, b, u_next):
        # B_{i+1} is indexed (x_{i+1}, x_{i+2}); u_{i+1} acts on the first slot
        bu = self.mul(b, u_next[:, None] if self.dim == 1 else u_next[:, :, None, None])
        if self.dim == 1:
            return _bwd3_1d_log(self.K[0], bu) if self.log else _bwd3_1d(self.K[0], bu)
        if self.log:
            return _bwd3_2d_log(self.K[0], self.K[1], bu)
        return _bwd3_2d(self.K[0], self.K[1], bu)

    def combine(self, f, b):
        """Contraction of F_j, the center stencil, and B_j down to step j."""
        if self.dim == 1:
            if self.log:
                return logsumexp(f[:, :, None] + self.K[0] + b[None, :, :], axis=(0, 2))
            w = _bwd3_1d(self.K[0], b)
            return (f * w).sum(axis=0)
        if self.log:
            h = _fwd3_2d_log(f, self.K[0], self.K[1])
            return logsumexp(h + b, axis=(2, 3))
        h = _fwd3_2d(f, self.K[0], self.K[1])
        return (h * b).sum(axis=(2, 3))

    # -- 2-point stencil over single states --------------------------------
    def sf_step(self, f, u):
        fu = self.mul(f, u)
        if self.dim == 1:
            if self.log:
                return logsumexp(fu[:, None] + self.K[0], axis=0)
            return fu @ self.K[0]
        if self.log:
            h = logsumexp(fu[:, :, None] + self.K[0][:, None, :], axis=0)  # (b,c)
            return logsumexp(h[:, :, None] + self.K[1][:, None, :], axis=0)  # (c,d)
        return self.K[0].T @ fu @ self.K[1]

    def sb_step(self, b, u_next):
        bu = self.mul(b, u_next)
        if self.dim == 1:
            if self.log:
                return logsumexp(self.K[0] + bu[None, :], axis=1)
            return self.K[0] @ bu
        if self.log:
            h = logsumexp(self.K[1][None, :, :] + bu[:, None, :], axis=2)  # (c,b)
            return logsumexp(self.K[0][:, None, :] + h.T[None, :, :], axis=2)  # (a,b)
        return self.K[0] @ bu @ self.K[1].T

    # -- chains -------------------------------------------------------------
    def backward_chain(self, u):
        n = self.n
        if self.kernel.stencil == 3:
            bwd = [None] * (n - 1)
            bwd[n - 2] = _norm_msg(self.b_init(u[n - 1]), self.log)
            for i in range(n - 3, -1, -1):
                bwd[i] = _norm_msg(self.b_step(bwd[i + 1], u[i + 1]), self.log)
            return bwd
        bwd = [None] * n
        bwd[n - 1] = self.ones()
        for i in range(n - 2, -1, -1):
            bwd[i] = _norm_msg(self.sb_step(bwd[i + 1], u[i + 1]), self.log)
        return bwd

    def forward_chain(self, u):
        n = self.n
        if self.kernel.stencil == 3:
            fwd = [None] * n
            fwd[1] = _norm_msg(self.f_init(u[0]), self.log)
            for i in range(1, n - 1):
                fwd[i + 1] = _norm_msg(self.f_step(fwd[i], u[i]), self.log)
            return fwd
        fwd = [None] * n
        fwd[0] = self.ones()
        for i in range(n - 1):
            fwd[i + 1] = _norm_msg(self.sf_step(fwd[i], u[i]), self.log)
        return fwd

    def contraction_at(self, fwd, bwd, j):
        """The scaling denominator at step j: the full contraction minus u_j."""
        n = self.n
        if self.kernel.stencil == 3:
            if j == 0:
                axes = tuple(range(self.dim, 2 * self.dim))
                return logsumexp(bwd[0], axis=axes) if self.log else bwd[0].sum(axis=axes)
            if j == n - 1:
                axes = tuple(range(self.dim))
                return logsumexp(fwd[n - 1], axis=axes) if self.log else fwd[n - 1].sum(axis=axes)
            return self.combine(fwd[j], bwd[j])
        return self.mul(fwd[j], bwd[j])


def _validate_constraints(kernel: ChainKernel, constraints):
    steps = tuple(int(j) for j, _ in constraints)
    if steps != kernel.timegrid.constrained:
        raise ValueError(
            f"constraint steps {steps} must match the time grid's constrained "
            f"indices {kernel.timegrid.constrained}")
    for j, rho in constraints:
        if rho.grid != kernel.grid:
            raise ValueError(f"constraint at step {j} lives on a different grid")
    return steps


def sinkhorn_solve(kernel: ChainKernel, constraints, tol: float = 1e-7,
                   max_iters: int = 5000, log_domain: bool = False,
                   check_every: int = 10, verbose: bool = False):
    """Gauss-Seidel scaling iterations on the constrained-time potentials.

    Each sweep recomputes the backward message chain, then walks the time
    axis forward, replacing each constrained potential by rho / contraction
    (0/0 := 0 on zero-mass nodes) before continuing.  Convergence is the
    max-norm of the change in log potentials between consecutive sweeps,
    sampled every `check_every` sweeps.

    Returns (PotentialSet, SolveReport); hitting max_iters is a warning in
    the report, not an error, while non-finite potentials raise
    SinkhornDivergence.
    """
    t0 = time.perf_counter()
    steps = _validate_constraints(kernel, constraints)
    chain = _Chain(kernel, log_domain)
    n = kernel.timegrid.n_steps
    rhos = {j: rho.weights for j, rho in constraints}
    supports = {j: rhos[j] > 0 for j in steps}
    log_rhos = {j: np.where(supports[j], np.log(np.where(supports[j], rhos[j], 1.0)), -np.inf)
                for j in steps}

    u = [chain.ones() for _ in range(n)]
    prev_logu = {j: np.zeros(kernel.grid.shape) for j in steps}
    report = SolveReport()
    residual = np.inf

    def current_logu(j):
        if log_domain:
            return u[j]
        with np.errstate(divide="ignore"):
            return np.log(u[j])

    sweeps_done = 0
    for sweep in range(1, max_iters + 1):
        bwd = chain.backward_chain(u)
        fwd_pos = None
        f = None
        for j in steps:
            if kernel.stencil == 3 and j >= 1:
                if f is None:
                    f = _norm_msg(chain.f_init(u[0]), log_domain)
                    fwd_pos = 1
                while fwd_pos < j:
                    f = _norm_msg(chain.f_step(f, u[fwd_pos]), log_domain)
                    fwd_pos += 1
            if kernel.stencil == 2:
                if f is None:
                    f = chain.ones()
                    fwd_pos = 0
                while fwd_pos < j:
                    f = _norm_msg(chain.sf_step(f, u[fwd_pos]), log_domain)
                    fwd_pos += 1
            fwd_stub = [None] * n
            if f is not None:
                fwd_stub[j] = f
            s = chain.contraction_at(fwd_stub, bwd, j)
            if log_domain:
                new = np.where(supports[j], log_rhos[j] - s, -np.inf)
                if np.any(np.isnan(new)) or np.any(np.isposinf(new)):
                    raise SinkhornDivergence(
                        "Sinkhorn diverged: increase epsilon or enable log-domain")
            else:
                new = np.zeros_like(s)
                np.divide(rhos[j], s, out=new, where=supports[j])
                if not np.all(np.isfinite(new)):
                    raise SinkhornDivergence(
                        "Sinkhorn diverged: increase epsilon or enable log-domain")
            u[j] = new
        sweeps_done = sweep

        cur = {j: current_logu(j) for j in steps}
        if sweep % check_every == 0 or sweep == max_iters:
            residual = 0.0
            for j in steps:
                sup = supports[j]
                d = np.abs(cur[j][sup] - prev_logu[j][sup])
                if d.size:
                    residual = max(residual, float(d.max()))
            report.residual_history.append((sweep, residual))
            if verbose:
                print(f"[sinkhorn] sweep {sweep:5d}  residual {residual:.3e}")
            if residual < tol:
                report.converged = True
                break
        prev_logu = cur

    report.iterations = sweeps_done
    if not report.converged:
        report.message = f"max_iters reached (residual {residual:.3e})"
        warnings.warn(f"Sinkhorn stopped at {max_iters} sweeps without reaching "
                      f"tol={tol:g} (residual {residual:.3e})")

    ps = PotentialSet(kernel=kernel, u=u,
                      potentials={j: u[j] for j in steps},
                      log_domain=log_domain)
    ps.fwd = chain.forward_chain(u)
    ps.bwd = chain.backward_chain(u)
    for j, rho in constraints:
        m = marginal_at(ps, kernel, j)
        report.marginal_residuals[j] = float(np.abs(m.weights - rho.weights).sum())
    report.wall_time_s = time.perf_counter() - t0
    return ps, report


def marginal_at(ps: PotentialSet, kernel: ChainKernel, j: int) -> DensityGrid:
    """Time marginal of the implied plan at step j, normalized to unit mass."""
    n = kernel.timegrid.n_steps
    if not 0 <= j < n:
        raise ValueError(f"step {j} outside time grid")
    chain = _Chain(kernel, ps.log_domain)
    s = chain.contraction_at(ps.fwd, ps.bwd, j)
    m = chain.mul(s, ps.u[j])
    if ps.log_domain:
        m = np.exp(m - m.max())
    m = np.maximum(m, 0.0)
    return DensityGrid(kernel.grid, m / m.sum())


def _to_plain(msg, log):
    return np.exp(msg - msg.max()) if log else msg


def pair_marginal(ps: PotentialSet, kernel: ChainKernel, i: int, j: int) -> np.ndarray:
    """Joint weights of the plan at steps (i, j) as an (n_nodes, n_nodes) array.

    Adjacent pairs come directly from the cached messages; separated pairs use
    a pinned forward propagation whose working tensor has n_nodes * pair-state
    entries and is refused above a memory budget (relevant for 2D grids).
    """
    n = kernel.timegrid.n_steps
    if not (0 <= i < j < n):
        raise ValueError("need steps 0 <= i < j within the time grid")
    chain = _Chain(kernel, ps.log_domain)
    dim = kernel.grid.dim
    nn = kernel.grid.n_nodes

    if kernel.stencil == 2:
        fu = chain.mul(ps.fwd[i], ps.u[i])
        bu = chain.mul(ps.bwd[j], ps.u[j])
        f = _to_plain(fu, ps.log_domain).reshape(-1)
        b = _to_plain(bu, ps.log_domain).reshape(-1)
        if j == i + 1:
            k2 = kernel.factors[0] if dim == 1 else np.kron(kernel.factors[0], kernel.factors[1])
            pm = f[:, None] * k2 * b[None, :]
        else:
            if nn * nn > PAIR_BUDGET:
                raise MemoryError("pair marginal exceeds the node-pair budget")
            k2 = kernel.factors[0] if dim == 1 else np.kron(kernel.factors[0], kernel.factors[1])
            prop = np.eye(nn) * f[:, None]
            for m in range(i, j):
                if m > i:
                    prop = prop * _to_plain(ps.u[m], ps.log_domain).reshape(-1)[None, :]
                prop = _norm_msg(prop @ k2, False)
            pm = prop * b[None, :]
        return pm / pm.sum()

    # 3-point stencil: F_{i+1} X B_i covers everything for adjacent pairs
    if j == i + 1:
        fpair = _to_plain(ps.fwd[i + 1], ps.log_domain)
        bpair = _to_plain(ps.bwd[i], ps.log_domain)
        pm = (fpair * bpair).reshape(nn, nn)
        return pm / pm.sum()

    if nn**3 > PAIR_BUDGET:
        raise MemoryError("pair marginal exceeds the node-pair budget")
    plain = _Chain(kernel, False)
    f = _to_plain(ps.fwd[i + 1], ps.log_domain)
    pair_shape = f.shape
    # pin the source index: R[s; x_m, x_{m+1}] starting at m = i
    r = np.zeros((nn,) + pair_shape)
    idx = np.arange(nn)
    if dim == 1:
        r[idx, idx, :] = f[idx, :]
    else:
        ia, ib = np.unravel_index(idx, kernel.grid.shape)
        r[idx, ia, ib] = f[ia, ib]
    pos = i + 1
    while pos < j:
        u_plain = _to_plain(ps.u[pos], ps.log_domain)
        stacked = [plain.f_step(r[s], u_plain) for s in range(nn)]
        r = _norm_msg(np.stack(stacked), False)
        pos += 1
    out = np.empty((nn, nn))
    fwd_stub = [None] * n
    for s in range(nn):
        fwd_stub[j] = r[s]
        bwd_stub = [_to_plain(b, ps.log_domain) if b is not None else None for b in ps.bwd]
        sj = plain.contraction_at(fwd_stub, bwd_stub, j)
        out[s] = (sj * _to_plain(ps.u[j], ps.log_domain)).reshape(-1)
    return out / out.sum()


def plan_cost(ps: PotentialSet, kernel: ChainKernel) -> float:
    """Expected chain cost <T, C> of the normalized plan."""
    chain = _Chain(kernel, False)
    n = kernel.timegrid.n_steps
    dim = kernel.grid.dim
    total = 0.0
    if kernel.stencil == 3:
        for i in range(1, n - 1):
            f = _to_plain(ps.fwd[i], ps.log_domain)
            b = _to_plain(ps.bwd[i], ps.log_domain)
            fu = f * (_to_plain(ps.u[i], ps.log_domain)[None, :] if dim == 1
                      else _to_plain(ps.u[i], ps.log_domain)[None, None, :, :])
            if dim == 1:
                k, c = kernel.factors[0], kernel.cost_factors[0]
                den = float((fu * _bwd3_1d(k, b)).sum())
                num = float((fu * _bwd3_1d(k * c, b)).sum())
                total += num / den
            else:
                ka, kb = kernel.factors
                ca, cb = kernel.cost_factors
                den = float((_fwd3_2d(fu, ka, kb) * b).sum())
                num = float((_fwd3_2d(fu, ka * ca, kb) * b).sum())
                num += float((_fwd3_2d(fu, ka, kb * cb) * b).sum())
                total += num / den
    else:
        for i in range(n - 1):
            fu = _to_plain(chain.mul(ps.fwd[i], ps.u[i]), ps.log_domain)
            bu = _to_plain(chain.mul(ps.bwd[i + 1], ps.u[i + 1]), ps.log_domain)
            if dim == 1:
                k, c = kernel.factors[0], kernel.cost_factors[0]
                den = float(fu @ k @ bu)
                num = float(fu @ (k * c) @ bu)
                total += num / den
            else:
                ka, kb = kernel.factors
                ca, cb = kernel.cost_factors
                den = float(np.einsum("ab,ac,bd,cd->", fu, ka, kb, bu, optimize=True))
                num = float(np.einsum("ab,ac,bd,cd->", fu, ka * ca, kb, bu, optimize=True))
                num += float(np.einsum("ab,ac,bd,cd->", fu, ka, kb * cb, bu, optimize=True))
                total += num / den
    return total


def extrapolate(kernel: ChainKernel, constraints, **solve_kwargs) -> DensityGrid:
    """Free-endpoint marginal of the 3-marginal extrapolation problem.

    Requires the extrapolation kernel and exactly two constraints at steps
    0 and 1; returns the marginal at step 2.
    """
    if kernel.cost_kind != "extrapolation":
        raise ValueError("extrapolate needs a kernel built with the extrapolation cost")
    steps = tuple(j for j, _ in constraints)
    if steps != (0, 1):
        raise ValueError("extrapolation constrains exactly steps 0 and 1")
    ps, _ = sinkhorn_solve(kernel, constraints, **solve_kwargs)
    return marginal_at(ps, kernel, 2)


# ---------------------------------------------------------------------------
# dense enumeration oracle
# ---------------------------------------------------------------------------

DENSE_GUARD = 1_000_000


@dataclass
class DenseSolution:
    plan: np.ndarray          # normalized joint plan over node indices
    marginals: list           # one DensityGrid per time step
    cost: float               # <T, C> of the normalized plan
    iterations: int = 0
    converged: bool = False


def dense_solve_oracle(grid: Grid, timegrid: TimeGrid, constraints,
                       epsilon: float, cost_kind: str, lam: float = None,
                       tol: float = 1e-12, max_iters: int = 20000) -> DenseSolution:
    """Reference solver enumerating the full plan tensor over all node paths.

    Solves the same scaling fixed point as sinkhorn_solve by explicit
    summation over the (n_nodes)^n_steps tensor; guarded to small instances.
    """
    n = timegrid.n_steps
    nn = grid.n_nodes
    if nn**n > DENSE_GUARD:
        raise ValueError(f"dense oracle refuses {nn}^{n} paths (> {DENSE_GUARD})")
    steps = tuple(int(j) for j, _ in constraints)
    if steps != timegrid.constrained:
        raise ValueError("constraint steps must match the time grid")
    nodes = grid.nodes()
    dtau = timegrid.dtau

    def coord(i, d):
        shape = [1] * n
        shape[i] = nn
        return nodes[:, d].reshape(shape)

    cost = np.zeros((nn,) * n)
    if cost_kind == "acceleration":
        for i in range(1, n - 1):
            for d in range(grid.dim):
                cost = cost + (coord(i + 1, d) + coord(i - 1, d) - 2.0 * coord(i, d)) ** 2 / dtau**3
    elif cost_kind == "speed":
        for i in range(n - 1):
            for d in range(grid.dim):
                cost = cost + (coord(i + 1, d) - coord(i, d)) ** 2 / dtau
    elif cost_kind == "extrapolation":
        if n != 3:
            raise ValueError("extrapolation is a 3-marginal problem")
        for d in range(grid.dim):
            cost = cost + (coord(2, d) - 2.0 * coord(1, d) + coord(0, d)) ** 2 / lam**2
            cost = cost + (coord(1, d) - coord(0, d)) ** 2 / lam
    else:
        raise ValueError(f"unknown cost kind {cost_kind!r}")

    kernel = np.maximum(np.exp(-cost / epsilon), KERNEL_FLOOR)
    rhos = {j: rho.flat for j, rho in constraints}
    us = {j: np.ones(nn) for j in steps}
    converged = False
    it = 0

    def apply_potentials(skip=None):
        t = kernel
        for j in steps:
            if j == skip:
                continue
            shape = [1] * n
            shape[j] = nn
            t = t * us[j].reshape(shape)
        return t

    for it in range(1, max_iters + 1):
        delta = 0.0
        for j in steps:
            t = apply_potentials(skip=j)
            s = t.sum(axis=tuple(a for a in range(n) if a != j))
            new = np.zeros(nn)
            np.divide(rhos[j], s, out=new, where=rhos[j] > 0)
            old = us[j]
            sup = (rhos[j] > 0) & (old > 0) & (new > 0)
            if sup.any():
                delta = max(delta, float(np.abs(np.log(new[sup]) - np.log(old[sup])).max()))
            us[j] = new
        if delta < tol:
            converged = True
            break

    plan = apply_potentials()
    plan = plan / plan.sum()
    margs = []
    for j in range(n):
        m = plan.sum(axis=tuple(a for a in range(n) if a != j))
        margs.append(DensityGrid(grid, m.reshape(grid.shape) / m.sum()))
    return DenseSolution(plan=plan, marginals=margs,
                         cost=float((plan * cost).sum()),
                         iterations=it, converged=converged)
