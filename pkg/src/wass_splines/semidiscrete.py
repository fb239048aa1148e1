"""Lagrangian particle solver for spline interpolation with transport penalties.

N particle trajectories are encoded by their knot positions and knot
velocities; the objective is the mean phase-space spline energy plus, per
constrained knot, a quadratic-Wasserstein penalty 1/(2 eps^2) W2^2 toward a
quantized target cloud.  The W2^2 surrogate matches equal-size uniform clouds
by an exact optimal assignment (entropic coupling with barycentric projection
above a size threshold); the matching is held fixed inside line searches and
refreshed between quasi-Newton restarts, so descent stays monotone.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize

from .core import WeightedPhaseCloud
from .phase_ot import sinkhorn_pairwise

ASSIGNMENT_LIMIT = 512


@dataclass(frozen=True)
class ParticleBundle:
    """Knot positions and velocities of N particle trajectories.

    Arrays are (n_knots, n_particles, dim).
    """

    times: np.ndarray
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if t.size < 2:
            raise ValueError("a bundle needs at least 2 knots")
        if np.any(np.diff(t) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if x.ndim != 3 or x.shape != v.shape or x.shape[0] != t.size:
            raise ValueError("positions/velocities must be (n_knots, N, d)")
        if x.shape[1] < 1:
            raise ValueError("need at least one particle")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("bundle entries must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def n_knots(self) -> int:
        return self.x.shape[0]

    @property
    def n_particles(self) -> int:
        return self.x.shape[1]

    @property
    def dim(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class PenaltyTarget:
    """Quantized target cloud at one knot with its penalty scale eps."""

    knot: int
    points: np.ndarray
    epsilon: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not self.epsilon > 0:
            raise ValueError("penalty epsilon must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "knot", int(self.knot))


def targets_from_clouds(clouds, knots, epsilons) -> list:
    """PenaltyTargets from quantized clouds (one per constrained knot)."""
    return [PenaltyTarget(k, c.x if isinstance(c, WeightedPhaseCloud) else c, e)
            for k, c, e in zip(knots, clouds, epsilons)]


@dataclass
class OptimizeConfig:
    gtol: float = 1e-6
    max_iters: int = 2000
    memory: int = 10
    chunk: int = 50          # quasi-Newton iterations between matching refreshes
    entropic_rel_eps: float = 1e-2


@dataclass
class OptimizeReport:
    iterations: int = 0
    objective: float = np.inf
    grad_norm: float = np.inf
    status: str = ""
    reassignments: int = 0
    objective_history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def w2_penalty(positions, target_points, mode: str = "auto",
               entropic_rel_eps: float = 1e-2):
    """Squared-Wasserstein surrogate between uniform clouds, with gradient.

    Assignment mode (exact for equal-size uniform clouds): value is
    (1/N) sum_j |x_j - y_sigma(j)|^2 for the optimal assignment sigma and the
    gradient is (2/N)(x_j - y_sigma(j)).  Entropic mode replaces the matched
    point by the barycentric projection under a converged entropic coupling.
    """
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    y = np.atleast_2d(np.asarray(target_points, dtype=float))
    n = x.shape[0]
    if mode == "auto":
        mode = "assignment" if (n <= ASSIGNMENT_LIMIT and y.shape[0] == n) else "entropic"
    if mode == "assignment":
        if y.shape[0] != n:
            raise ValueError(
                f"assignment mode needs equal cloud sizes, got {n} vs {y.shape[0]}")
        b = y[_assign(x, y)]
    elif mode == "entropic":
        b = _barycentric_targets(x, y, entropic_rel_eps)
    else:
        raise ValueError(f"unknown w2 penalty mode {mode!r}")
    diff = x - b
    value = float(np.sum(diff * diff) / n)
    grad = 2.0 * diff / n
    return value, grad


def _assign(x, y):
    d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(d2)
    out = np.empty(x.shape[0], dtype=int)
    out[rows] = cols
    return out


def _barycentric_targets(x, y, rel_eps):
    d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    eps = max(float(np.median(d2)) * rel_eps, 1e-12)
    alpha = np.full(x.shape[0], 1.0 / x.shape[0])
    beta = np.full(y.shape[0], 1.0 / y.shape[0])
    coupling, _ = sinkhorn_pairwise(d2, alpha, beta, eps, tol=1e-6, max_iters=10000, log_domain=True)
    plan = coupling.weights
    return (plan @ y) / plan.sum(axis=1, keepdims=True)


class _SdvProblem:
    """Semi-discrete variational objective with a frozen matching.

    The penalty matching is treated as a constant under differentiation
    (envelope argument); callers refresh it between optimizer iterations.
    """

    def __init__(self, times, targets, n_particles, dim, cost="acceleration",
                 extrapolation=False, entropic_rel_eps=1e-2,
                 frozen_positions=False):
        self.times = np.asarray(times, dtype=float)
        self.deltas = np.diff(self.times)
        self.targets = list(targets)
        self.n = self.times.size
        self.N = n_particles
        self.d = dim
        self.cost = cost
        self.extrapolation = extrapolation
        self.entropic_rel_eps = entropic_rel_eps
        self.frozen_positions = frozen_positions
        self.matched = {}  # knot -> matched target per particle
        for t in self.targets:
            if not 0 <= t.knot < self.n:
                raise ValueError(f"target knot {t.knot} outside the bundle")
            if t.points.shape[1] != dim:
                raise ValueError("target dimension does not match the bundle")

    # -- matching ----------------------------------------------------------
    def reassign(self, x) -> bool:
        changed = False
        for t in self.targets:
            pts = x[t.knot]
            if pts.shape[0] <= ASSIGNMENT_LIMIT and t.points.shape[0] == pts.shape[0]:
                b = t.points[_assign(pts, t.points)]
            else:
                b = _barycentric_targets(pts, t.points, self.entropic_rel_eps)
            prev = self.matched.get(t.knot)
            if prev is None or not np.array_equal(prev, b):
                changed = True
            self.matched[t.knot] = b
        return changed

    # -- objective ---------------------------------------------------------
    def spline_value_grad(self, x, v):
        n, N = self.n, self.N
        gx = np.zeros_like(x)
        gv = np.zeros_like(v)
        value = 0.0
        if self.cost == "speed":
            for i in range(n - 1):
                delta = self.deltas[i]
                step = x[i + 1] - x[i]
                value += float(np.sum(step * step)) / delta
                g = 2.0 * step / (delta * N)
                gx[i] -= g
                gx[i + 1] += g
            return value / N, gx, gv
        for i in range(n - 1):
            delta = self.deltas[i]
            d0 = x[i] - x[i + 1]
            sv0 = delta * v[i]
            sv1 = delta * v[i + 1]
            seg = (12.0 * np.sum(d0 * d0)
                   + 4.0 * (np.sum(sv0 * sv0) + np.sum(sv1 * sv1) + np.sum(sv0 * sv1)
                            + 3.0 * np.sum((sv0 + sv1) * d0)))
            value += seg / delta**3
            gxi = (24.0 * d0 + 12.0 * delta * (v[i] + v[i + 1])) / (delta**3 * N)
            gx[i] += gxi
            gx[i + 1] -= gxi
            gv[i] += (4.0 / delta) * (2.0 * v[i] + v[i + 1]) / N + (12.0 / delta**2) * d0 / N
            gv[i + 1] += (4.0 / delta) * (2.0 * v[i + 1] + v[i]) / N + (12.0 / delta**2) * d0 / N
        return value / N, gx, gv

    def penalty_value_grad(self, x):
        value = 0.0
        gx = np.zeros_like(x)
        for t in self.targets:
            b = self.matched[t.knot]
            diff = x[t.knot] - b
            w = 1.0 / (2.0 * t.epsilon**2)
            value += w * float(np.sum(diff * diff)) / self.N
            gx[t.knot] += w * 2.0 * diff / self.N
        return value, gx

    def extrapolation_value_grad(self, x):
        step = x[1] - x[0]
        value = 0.5 * float(np.sum(step * step)) / self.N
        gx = np.zeros_like(x)
        gx[0] -= step / self.N
        gx[1] += step / self.N
        return value, gx

    def value_grad(self, z):
        x, v = self.unpack(z)
        val, gx, gv = self.spline_value_grad(x, v)
        pv, pg = self.penalty_value_grad(x)
        val += pv
        gx += pg
        if self.extrapolation:
            ev, eg = self.extrapolation_value_grad(x)
            val += ev
            gx += eg
        if self.frozen_positions:
            gx = np.zeros_like(gx)
        return val, np.concatenate([gx.ravel(), gv.ravel()])

    def pack(self, x, v):
        return np.concatenate([x.ravel(), v.ravel()])

    def unpack(self, z):
        m = self.n * self.N * self.d
        x = z[:m].reshape(self.n, self.N, self.d)
        v = z[m:].reshape(self.n, self.N, self.d)
        return x, v


def _problem_for(bundle, targets, cost, extrapolation, entropic_rel_eps=1e-2,
                 frozen_positions=False):
    prob = _SdvProblem(bundle.times, targets, bundle.n_particles, bundle.dim,
                       cost=cost, extrapolation=extrapolation,
                       entropic_rel_eps=entropic_rel_eps,
                       frozen_positions=frozen_positions)
    prob.reassign(bundle.x)
    return prob


def sdv_objective(bundle: ParticleBundle, targets, cost: str = "acceleration",
                  extrapolation: bool = False) -> float:
    """Mean spline energy of (X, V) plus the transport penalties.

    The velocities enter as free variables (no inner minimization), matching
    descent in phase space.
    """
    prob = _problem_for(bundle, targets, cost, extrapolation)
    val, _ = prob.value_grad(prob.pack(bundle.x, bundle.v))
    return float(val)


def sdv_gradient(bundle: ParticleBundle, targets, cost: str = "acceleration",
                 extrapolation: bool = False):
    """Analytic gradient of sdv_objective w.r.t. all positions and velocities.

    The matching inside the penalties is held fixed under differentiation.
    """
    prob = _problem_for(bundle, targets, cost, extrapolation)
    _, g = prob.value_grad(prob.pack(bundle.x, bundle.v))
    m = bundle.n_knots * bundle.n_particles * bundle.dim
    return g[:m].reshape(bundle.x.shape), g[m:].reshape(bundle.v.shape)


def optimize(bundle0: ParticleBundle, targets, config: OptimizeConfig = None,
             cost: str = "acceleration", extrapolation: bool = False,
             frozen_positions: bool = False):
    """Quasi-Newton descent to a stationary point of the particle objective.

    Runs limited-memory BFGS in chunks; the penalty matching is refreshed
    between chunks (never inside a line search) and refreshing can only lower
    the objective, so descent is monotone across accepted iterates.  With
    frozen_positions only the velocities move (geodesic-constrained runs).
    """
    cfg = config or OptimizeConfig()
    prob = _problem_for(bundle0, targets, cost, extrapolation,
                        entropic_rel_eps=cfg.entropic_rel_eps,
                        frozen_positions=frozen_positions)
    z = prob.pack(bundle0.x, bundle0.v)
    report = OptimizeReport()
    report.objective_history.append(prob.value_grad(z)[0])

    used = 0
    failures = 0
    stalls = 0
    status = "max_iters"
    while used < cfg.max_iters:
        budget = min(cfg.chunk, cfg.max_iters - used)
        res = minimize(prob.value_grad, z, jac=True, method="L-BFGS-B",
                       options={"maxiter": budget, "maxcor": cfg.memory,
                                "gtol": cfg.gtol, "ftol": 1e-15})
        used += res.nit
        z = res.x
        report.objective_history.append(float(res.fun))
        changed = prob.reassign(prob.unpack(z)[0])
        report.reassignments += int(changed)
        if changed:
            report.objective_history.append(prob.value_grad(z)[0])
        if res.status == 2:
            failures += 1
            if failures >= 3 and not changed:
                # stuck at the float64 precision floor or in a genuine failure
                grad_now = float(np.abs(prob.value_grad(z)[1]).max())
                if grad_now <= 1e3 * cfg.gtol:
                    status = "converged"
                else:
                    status = "line_search_failure"
                    warnings.warn("line search failed repeatedly; returning best iterate")
                break
        else:
            failures = 0
        if res.status == 0 and not changed:
            status = "converged"
            break
        stalls = stalls + 1 if res.nit == 0 else 0
        if stalls >= 5:
            # matching keeps flipping between equal-cost assignments
            status = "converged" if res.status == 0 else status
            break

    x, v = prob.unpack(z)
    val, g = prob.value_grad(z)
    report.iterations = used
    report.objective = float(val)
    report.grad_norm = float(np.abs(g).max())
    report.status = status
    if status == "max_iters":
        warnings.warn(f"optimizer stopped after {used} iterations "
                      f"(grad norm {report.grad_norm:.3e})")
    return ParticleBundle(bundle0.times, x, v), report


@dataclass
class Stage:
    """One annealing stage: per-constraint penalty scales plus start-up noise."""

    epsilons: tuple
    noise: float = 0.0
    max_iters: int = None


def multiscale_solve(bundle0: ParticleBundle, targets, stages, seed: int = 0,
                     config: OptimizeConfig = None, cost: str = "acceleration",
                     extrapolation: bool = False):
    """Staged annealing: optimize per stage, warm-starting the next stage.

    Each stage overrides the per-constraint epsilons and may perturb its
    initial iterate with zero-mean Gaussian noise (seeded; scale 0 keeps the
    run fully deterministic).  A single no-noise stage reduces to optimize().
    """
    cfg = config or OptimizeConfig()
    rng = np.random.default_rng(seed)
    bundle = bundle0
    reports = []
    for stage in stages:
        eps = stage.epsilons
        if len(eps) != len(targets):
            raise ValueError("each stage needs one epsilon per constrained knot")
        staged_targets = [replace(t, epsilon=float(e)) for t, e in zip(targets, eps)]
        if stage.noise > 0:
            bundle = ParticleBundle(
                bundle.times,
                bundle.x + rng.normal(scale=stage.noise, size=bundle.x.shape),
                bundle.v + rng.normal(scale=stage.noise, size=bundle.v.shape))
        stage_cfg = cfg if stage.max_iters is None else replace(cfg, max_iters=stage.max_iters)
        bundle, rep = optimize(bundle, staged_targets, stage_cfg, cost=cost,
                               extrapolation=extrapolation)
        reports.append(rep)
    return bundle, reports


def sd_extrapolate(targets, config: OptimizeConfig = None, bundle0: ParticleBundle = None,
                   times=(0.0, 1.0, 2.0), seed: int = 0):
    """Geodesic extrapolation: 3 knots, penalties on the first two, third free.

    Adds the half squared-distance term between the first two knots, which
    pins the curve to the transport geodesic of the two constraints; at a
    stationary point every particle's knots are collinear and equally spaced,
    so the free knot continues each trajectory in a straight line.
    """
    if len(targets) != 2:
        raise ValueError("extrapolation takes exactly 2 penalty targets")
    knots = sorted(t.knot for t in targets)
    if knots != [0, 1]:
        raise ValueError("extrapolation targets must sit on knots 0 and 1")
    if bundle0 is None:
        bundle0 = initial_bundle("coupled", [t.points for t in targets], times,
                                 targets[0].points.shape[0], seed=seed,
                                 extend_to=3)
    if bundle0.n_knots != 3:
        raise ValueError("extrapolation bundles have exactly 3 knots")
    return optimize(bundle0, targets, config, cost="acceleration", extrapolation=True)


def initial_bundle(mode: str, clouds, times, n_particles: int, seed: int = 0,
                   middle: int = None, warm_path=None, extend_to: int = None) -> ParticleBundle:
    """Construct a starting bundle.

    coupled: knot i of particle j sits at point j of the i-th cloud (a shared
    quantization index), velocities from finite differences of the knots.
    quantized-middle: every knot starts at a randomly enumerated point of one
    cloud (the middle constraint by default) with zero velocity.
    geodesic: knots follow the piecewise transport geodesic through the
    clouds, chaining exact assignments outward from the middle cloud.
    warm: restore a bundle checkpoint CSV.
    """
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng(seed)
    if mode == "warm":
        if warm_path is None:
            raise ValueError("warm start needs a checkpoint path")
        return read_bundle_csv(warm_path)
    pts = [np.atleast_2d(np.asarray(c.x if isinstance(c, WeightedPhaseCloud) else c,
                                    dtype=float)) for c in clouds]
    d = pts[0].shape[1]
    if any(p.shape != (n_particles, d) for p in pts):
        raise ValueError("init clouds must all have n_particles points")
    if mode == "coupled":
        x = np.stack(pts)
        if extend_to is not None and extend_to > x.shape[0]:
            # continue the last segment linearly for unconstrained knots
            for k in range(x.shape[0], extend_to):
                x = np.concatenate([x, (2.0 * x[-1] - x[-2])[None]], axis=0)
        n = x.shape[0]
        if times.size != n:
            raise ValueError("one knot time per knot required")
        v = np.gradient(x, times, axis=0)
        return ParticleBundle(times, x, v)
    if mode == "quantized-middle":
        n = times.size
        src = pts[middle if middle is not None else len(pts) // 2]
        perm = rng.permutation(n_particles)
        x = np.repeat(src[perm][None, :, :], n, axis=0)
        return ParticleBundle(times, x, np.zeros_like(x))
    if mode == "geodesic":
        if times.size != len(pts):
            raise ValueError("one knot time per cloud required")
        mid = middle if middle is not None else len(pts) // 2
        x = [None] * len(pts)
        x[mid] = pts[mid]
        for k in range(mid - 1, -1, -1):
            x[k] = pts[k][_assign(x[k + 1], pts[k])]
        for k in range(mid + 1, len(pts)):
            x[k] = pts[k][_assign(x[k - 1], pts[k])]
        x = np.stack(x)
        v = np.gradient(x, times, axis=0)
        return ParticleBundle(times, x, v)
    raise ValueError(f"unknown init mode {mode!r}")


# ---------------------------------------------------------------------------
# bundle checkpoints: one `particle,knot,x...,v...` line per knot per particle
# ---------------------------------------------------------------------------

def write_bundle_csv(bundle: ParticleBundle, path) -> None:
    from .core import _fmt

    with open(path, "w") as f:
        f.write("# particle,knot,t," +
                ",".join(f"x{k}" for k in range(bundle.dim)) + "," +
                ",".join(f"v{k}" for k in range(bundle.dim)) + "\n")
        for j in range(bundle.n_particles):
            for i in range(bundle.n_knots):
                row = ([float(j), float(i), bundle.times[i]]
                       + list(bundle.x[i, j]) + list(bundle.v[i, j]))
                f.write(",".join(_fmt(val) for val in row) + "\n")


def read_bundle_csv(path) -> ParticleBundle:
    rows = []
    with open(path) as f:
        for ln in f:
            ln = ln.strip()
            if ln and not ln.startswith("#"):
                rows.append([float(v) for v in ln.split(",")])
    if not rows:
        raise ValueError(f"{path}: empty bundle file")
    arr = np.array(rows)
    d = (arr.shape[1] - 3) // 2
    particles = sorted(set(int(r[0]) for r in rows))
    knots = sorted(set(int(r[1]) for r in rows))
    n, npart = len(knots), len(particles)
    times = np.zeros(n)
    x = np.zeros((n, npart, d))
    v = np.zeros((n, npart, d))
    for r in arr:
        j, i = int(r[0]), int(r[1])
        times[i] = r[2]
        x[i, j] = r[3:3 + d]
        v[i, j] = r[3 + d:3 + 2 * d]
    return ParticleBundle(times, x, v)
