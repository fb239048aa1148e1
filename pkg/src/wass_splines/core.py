"""Shared geometric data types: grids, densities, mixtures, phase-space clouds.

All types are immutable after construction (arrays are marked read-only) and
every operation here is pure, so everything is safe to share across threads.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

MASS_ATOL = 1e-12
MASS_WARN = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Grid:
    """Regular Cartesian grid with node-at-endpoint convention.

    Nodes along axis k are ``lo[k] + i * h[k]`` for ``i = 0..nx-1``; the total
    node count is ``nx ** dim``.  Only ``dim`` in {1, 2} is supported.
    """

    dim: int
    nx: int
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"grid dim must be 1 or 2, got {self.dim}")
        if self.nx < 2:
            raise ValueError(f"grid needs nx >= 2 points per axis, got {self.nx}")
        lo = tuple(float(x) for x in np.atleast_1d(self.lo))
        hi = tuple(float(x) for x in np.atleast_1d(self.hi))
        if len(lo) != self.dim or len(hi) != self.dim:
            raise ValueError("box bounds must have one (lo, hi) pair per axis")
        for a, b in zip(lo, hi):
            if not a < b:
                raise ValueError(f"invalid box [{a}, {b}]: lo must be < hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def h(self) -> tuple:
        return tuple((b - a) / (self.nx - 1) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self) -> tuple:
        return (self.nx,) * self.dim

    @property
    def n_nodes(self) -> int:
        return self.nx**self.dim

    def axes(self) -> list:
        """Per-axis node coordinates, each an array of length nx."""
        return [np.linspace(a, b, self.nx) for a, b in zip(self.lo, self.hi)]

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, dim), row-major order."""
        axes = self.axes()
        if self.dim == 1:
            return axes[0][:, None]
        xa, xb = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([xa.ravel(), xb.ravel()])


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time discretization with a subset of constrained node indices."""

    n_steps: int
    dtau: float
    constrained: tuple
    labels: tuple = None

    def __post_init__(self):
        if self.n_steps < 3:
            raise ValueError(f"time grid needs at least 3 nodes, got {self.n_steps}")
        if not self.dtau > 0:
            raise ValueError("dtau must be positive")
        idx = tuple(int(j) for j in self.constrained)
        if len(idx) < 2:
            raise ValueError("need at least 2 constrained time indices")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("constrained indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] > self.n_steps - 1:
            raise ValueError(
                f"constrained indices must lie in [0, {self.n_steps - 1}], got {idx}"
            )
        object.__setattr__(self, "constrained", idx)
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != len(idx):
                raise ValueError("one label per constrained index required")
            object.__setattr__(self, "labels", labels)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dtau


@dataclass(frozen=True)
class DensityGrid:
    """Nonnegative, normalized weights over the nodes of a Grid."""

    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape == (self.grid.n_nodes,):
            w = w.reshape(self.grid.shape)
        if w.shape != self.grid.shape:
            raise ValueError(f"weights shape {w.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("density weights must be finite")
        if np.any(w < 0):
            raise ValueError("density weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("density has zero total mass")
        if abs(total - 1.0) > MASS_WARN:
            warnings.warn(f"density mass {total:.6g} deviates from 1; renormalizing")
        if abs(total - 1.0) > MASS_ATOL:
            w = w / total
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)

    def barycenter(self) -> np.ndarray:
        return self.flat @ self.grid.nodes()

    def variance(self) -> float:
        """Total spatial variance (trace of the covariance matrix)."""
        nodes = self.grid.nodes()
        mean = self.flat @ nodes
        return float(self.flat @ np.sum((nodes - mean) ** 2, axis=1))


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Isotropic Gaussian mixture: components are (weight, mean, variance)."""

    components: tuple

    def __post_init__(self):
        comps = []
        for c in self.components:
            w, mean, var = c
            mean = tuple(float(m) for m in np.atleast_1d(mean))
            if not w > 0:
                raise ValueError("mixture weights must be positive")
            if not var > 0:
                raise ValueError("mixture variances must be positive")
            comps.append((float(w), mean, float(var)))
        if not comps:
            raise ValueError("mixture needs at least one component")
        total = sum(w for w, _, _ in comps)
        if abs(total - 1.0) > MASS_WARN:
            warnings.warn(f"mixture weights sum to {total:.6g}; renormalizing")
        if abs(total - 1.0) > MASS_ATOL:
            comps = [(w / total, m, v) for w, m, v in comps]
        object.__setattr__(self, "components", tuple(comps))

    @property
    def dim(self) -> int:
        return len(self.components[0][1])

    def pdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(pts.shape[0])
        d = pts.shape[1]
        for w, mean, var in self.components:
            if len(mean) != d:
                raise ValueError("mixture/point dimension mismatch")
            sq = np.sum((pts - np.asarray(mean)) ** 2, axis=1)
            out += w * np.exp(-0.5 * sq / var) / (2.0 * np.pi * var) ** (d / 2.0)
        return out

    def mean(self) -> np.ndarray:
        return sum(w * np.asarray(m) for w, m, _ in self.components)


@dataclass(frozen=True)
class PhasePoint:
    """A point (x, v) in position-velocity space."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if x.shape != v.shape or x.ndim != 1:
            raise ValueError("position and velocity must be vectors of equal dimension")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("phase point coordinates must be finite")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "v", _readonly(v))

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class WeightedPhaseCloud:
    """Weighted empirical measure on phase space: points (x_i, v_i), weights a_i."""

    x: np.ndarray
    v: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        v = np.atleast_2d(np.asarray(self.v, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if x.shape != v.shape:
            raise ValueError("positions and velocities must have equal shape")
        if w.shape[0] != x.shape[0]:
            raise ValueError("one weight per point required")
        if np.any(w < 0):
            raise ValueError("cloud weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("cloud has zero total mass")
        if abs(total - 1.0) > MASS_WARN:
            warnings.warn(f"cloud mass {total:.6g} deviates from 1; renormalizing")
        if abs(total - 1.0) > MASS_ATOL:
            w = w / total
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "v", _readonly(v))
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def point(self, i: int) -> PhasePoint:
        return PhasePoint(self.x[i], self.v[i])


def rasterize_mixture(spec: GaussianMixtureSpec, grid: Grid) -> DensityGrid:
    """Evaluate a Gaussian mixture at grid nodes and renormalize to a density.

    Raises if the mixture mass captured by the grid falls below 1e-8 of the
    analytic mass, i.e. the density escapes the domain.
    """
    if spec.dim != grid.dim:
        raise ValueError(f"mixture dim {spec.dim} does not match grid dim {grid.dim}")
    vals = spec.pdf(grid.nodes())
    cell = np.prod(grid.h)
    if vals.sum() * cell < 1e-8:
        raise ValueError("density escapes domain")
    return DensityGrid(grid, (vals / vals.sum()).reshape(grid.shape))


def _lloyd_1d(nodes, masses, points, max_iters=100):
    """1D Lloyd refinement of code points on a discrete density."""
    pts = np.sort(points)
    span = nodes[-1] - nodes[0]
    for _ in range(max_iters):
        edges = 0.5 * (pts[:-1] + pts[1:])
        cell = np.searchsorted(edges, nodes)
        msum = np.bincount(cell, weights=masses, minlength=pts.size)
        xsum = np.bincount(cell, weights=masses * nodes, minlength=pts.size)
        new = pts.copy()
        nonempty = msum > 0
        new[nonempty] = xsum[nonempty] / msum[nonempty]
        shift = np.max(np.abs(new - pts))
        pts = np.sort(new)
        if shift <= 1e-14 * max(span, 1.0):
            break
    return pts


def _lloyd_2d(nodes, masses, points, max_iters=100):
    """Weighted k-means (Lloyd) on the discrete node masses."""
    pts = points.copy()
    for _ in range(max_iters):
        d2 = np.sum((nodes[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        owner = np.argmin(d2, axis=1)
        msum = np.bincount(owner, weights=masses, minlength=pts.shape[0])
        new = pts.copy()
        for k in range(pts.shape[1]):
            s = np.bincount(owner, weights=masses * nodes[:, k], minlength=pts.shape[0])
            nonempty = msum > 0
            new[nonempty, k] = s[nonempty] / msum[nonempty]
        shift = np.max(np.abs(new - pts))
        pts = new
        if shift <= 1e-12:
            break
    return pts


def quantize_density(density: DensityGrid, count: int, seed: int = 0) -> WeightedPhaseCloud:
    """Approximate a grid density by ``count`` uniformly weighted points.

    Deterministic: 1D uses inverse-CDF sampling at the midpoint quantiles
    (k - 1/2) / count followed by Lloyd refinement (count = 1 therefore yields
    the density barycenter); 2D runs weighted Lloyd seeded by stratified
    (systematic) sampling with the given seed.  Velocities are set to zero.
    """
    if count < 1:
        raise ValueError("quantization count must be >= 1")
    grid = density.grid
    masses = density.flat
    qs = (np.arange(count) + 0.5) / count
    if grid.dim == 1:
        nodes = grid.axes()[0]
        cdf = np.cumsum(masses)
        idx = np.searchsorted(cdf, qs * cdf[-1], side="left")
        pts = _lloyd_1d(nodes, masses, nodes[np.minimum(idx, nodes.size - 1)])
        x = pts[:, None]
    else:
        nodes = grid.nodes()
        cdf = np.cumsum(masses)
        idx = np.minimum(np.searchsorted(cdf, qs * cdf[-1], side="left"), len(masses) - 1)
        seeds = nodes[idx].astype(float)
        rng = np.random.default_rng(seed)
        seeds = seeds + rng.normal(scale=1e-6 * max(grid.h), size=seeds.shape)
        x = _lloyd_2d(nodes, masses, seeds)
    return WeightedPhaseCloud(x, np.zeros_like(x), np.full(count, 1.0 / count))


def quartile_level(density: DensityGrid, q: float) -> float:
    """Largest threshold t with total weight of nodes of weight >= t at least q."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile fraction q must be in (0, 1)")
    ws = np.sort(density.flat)[::-1]
    cs = np.cumsum(ws)
    idx = int(np.searchsorted(cs, q * cs[-1] - 1e-12, side="left"))
    return float(ws[min(idx, ws.size - 1)])


# ---------------------------------------------------------------------------
# CSV round-tripping.  Density files carry a `# dim,nx,lo...,hi...` header
# followed by one weight per line in row-major node order; cloud files have
# one `x...,v...,w` line per point.
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_density_csv(density: DensityGrid, path) -> None:
    g = density.grid
    header = ",".join(
        [str(g.dim), str(g.nx)] + [_fmt(a) for a in g.lo] + [_fmt(b) for b in g.hi]
    )
    lines = [f"# {header}"] + [_fmt(w) for w in density.flat]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_density_csv(path) -> DensityGrid:
    with open(path) as f:
        raw = [ln.strip() for ln in f if ln.strip()]
    if not raw or not raw[0].startswith("#"):
        raise ValueError(f"{path}: missing density header line")
    fields = raw[0].lstrip("# ").split(",")
    dim, nx = int(fields[0]), int(fields[1])
    lo = tuple(float(v) for v in fields[2 : 2 + dim])
    hi = tuple(float(v) for v in fields[2 + dim : 2 + 2 * dim])
    grid = Grid(dim, nx, lo, hi)
    weights = np.array([float(v) for v in raw[1:]])
    if weights.size != grid.n_nodes:
        raise ValueError(f"{path}: expected {grid.n_nodes} weights, found {weights.size}")
    return DensityGrid(grid, weights)


def write_cloud_csv(cloud: WeightedPhaseCloud, path) -> None:
    with open(path, "w") as f:
        for i in range(cloud.size):
            row = list(cloud.x[i]) + list(cloud.v[i]) + [cloud.weights[i]]
            f.write(",".join(_fmt(v) for v in row) + "\n")


def read_cloud_csv(path) -> WeightedPhaseCloud:
    rows = []
    with open(path) as f:
        for ln in f:
            ln = ln.strip()
            if ln and not ln.startswith("#"):
                rows.append([float(v) for v in ln.split(",")])
    if not rows:
        raise ValueError(f"{path}: empty cloud file")
    arr = np.array(rows)
    if arr.shape[1] % 2 != 1:
        raise ValueError(f"{path}: cloud rows must be x...,v...,w")
    d = (arr.shape[1] - 1) // 2
    return WeightedPhaseCloud(arr[:, :d], arr[:, d : 2 * d], arr[:, -1])
