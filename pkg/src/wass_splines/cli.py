"""Batch command-line front end.

`wass-splines run <config.json>` parses a scenario config, dispatches to one
solver, and writes every artifact (marginals, trajectories, couplings,
convergence log, manifest) as CSV under the configured output directory; the
manifest lists every file written.  `wass-splines validate <config.json>`
runs the full schema and cross-field validation without solving.

Exit codes: 0 ok, 2 config error, 3 solver divergence, 4 I/O error.  The env
var WASS_SPLINES_THREADS caps internal data-parallelism (BLAS thread pools);
it must be honored before numpy is first imported, so all solver imports
happen inside the commands.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

SCHEMA_VERSION = 1
SOLVERS = ("mm-spline", "mm-geodesic", "mm-extrapolate",
           "hermite", "sd-spline", "sd-extrapolate")


class ConfigError(ValueError):
    """Schema or cross-field violation; the message names the field."""


def _get(cfg, key, kinds, where="", required=True, default=None):
    if key not in cfg:
        if required:
            raise ConfigError(f"{where}{key}: missing required field")
        return default
    val = cfg[key]
    if kinds is not None and not isinstance(val, kinds):
        names = kinds.__name__ if isinstance(kinds, type) else "/".join(
            k.__name__ for k in kinds)
        raise ConfigError(f"{where}{key}: expected {names}, got {type(val).__name__}")
    return val


def _positive(cfg, key, where="", required=True, default=None):
    val = _get(cfg, key, (int, float), where, required, default)
    if val is not None and not val > 0:
        raise ConfigError(f"{where}{key}: must be positive, got {val}")
    return val


@dataclass
class ScenarioConfig:
    solver: str
    raw: dict
    config_dir: str
    output_dir: str
    seed: int = 0


def _validate_grid(cfg, where="grid."):
    g = _get(cfg, "grid", dict)
    dim = _get(g, "dim", int, where)
    if dim not in (1, 2):
        raise ConfigError(f"{where}dim: must be 1 or 2, got {dim}")
    nx = _get(g, "nx", int, where)
    if nx < 2:
        raise ConfigError(f"{where}nx: must be >= 2, got {nx}")
    box = _get(g, "box", list, where)
    if len(box) != dim or any(not (isinstance(b, list) and len(b) == 2) for b in box):
        raise ConfigError(f"{where}box: expected {dim} [lo, hi] pairs")
    for lo, hi in box:
        if not lo < hi:
            raise ConfigError(f"{where}box: lo must be < hi, got [{lo}, {hi}]")
    return g


def _validate_mixture(mix, dim, where):
    comps = _get(mix, "components", list, where)
    if not comps:
        raise ConfigError(f"{where}components: needs at least one component")
    for i, c in enumerate(comps):
        cw = f"{where}components[{i}]."
        _positive(c, "weight", cw)
        mean = _get(c, "mean", list, cw)
        if len(mean) != dim:
            raise ConfigError(f"{cw}mean: expected {dim} coordinates")
        _positive(c, "variance", cw)


def _validate_constraint_source(entry, dim, config_dir, where):
    sources = [k for k in ("mixture", "density_file", "uniform", "diracs") if k in entry]
    if len(sources) != 1:
        raise ConfigError(
            f"{where}: exactly one of mixture/density_file/uniform/diracs required")
    kind = sources[0]
    if kind == "mixture":
        _validate_mixture(entry["mixture"], dim, where + "mixture.")
    elif kind == "density_file":
        path = os.path.join(config_dir, entry["density_file"])
        if not os.path.exists(path):
            raise ConfigError(f"{where}density_file: no such file {entry['density_file']}")
    elif kind == "diracs":
        ds = entry["diracs"]
        if not isinstance(ds, list) or not ds:
            raise ConfigError(f"{where}diracs: expected a nonempty list")
        for i, d in enumerate(ds):
            pt = _get(d, "point", list, f"{where}diracs[{i}].")
            if len(pt) != dim:
                raise ConfigError(f"{where}diracs[{i}].point: expected {dim} coordinates")
            _positive(d, "weight", f"{where}diracs[{i}].")


def _validate_mm(cfg, config_dir):
    g = _validate_grid(cfg)
    tg = _get(cfg, "timegrid", dict)
    n_steps = _get(tg, "n_steps", int, "timegrid.")
    if n_steps < 3:
        raise ConfigError(f"timegrid.n_steps: must be >= 3, got {n_steps}")
    _positive(tg, "dtau", "timegrid.")
    cons = _get(cfg, "constraints", list)
    if len(cons) < 2:
        raise ConfigError("constraints: need at least 2 constrained times")
    steps = []
    for i, entry in enumerate(cons):
        where = f"constraints[{i}]."
        step = _get(entry, "step", (int, float), where)
        if isinstance(step, float) and not float(step).is_integer():
            raise ConfigError(
                f"{where}step: constraint times must coincide with time-grid "
                f"steps (the grid solver does not snap), got {step}")
        step = int(step)
        if not 0 <= step < n_steps:
            raise ConfigError(f"{where}step: {step} outside [0, {n_steps - 1}]")
        steps.append(step)
        _validate_constraint_source(entry, g["dim"], config_dir, where)
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ConfigError("constraints: steps must be strictly increasing")
    _positive(cfg, "epsilon")
    stop = _get(cfg, "stop", dict, required=False, default={})
    if stop:
        _positive(stop, "tol", "stop.", required=False)
        _get(stop, "max_iters", int, "stop.", required=False)
    if cfg.get("solver") == "mm-extrapolate":
        if n_steps != 3:
            raise ConfigError("timegrid.n_steps: extrapolation is a 3-marginal "
                              "problem, n_steps must be 3")
        if steps != [0, 1]:
            raise ConfigError("constraints: extrapolation constrains steps 0 and 1")
        lam = cfg.get("lambda")
        if lam is not None and not (isinstance(lam, (int, float)) and lam > 0):
            raise ConfigError(f"lambda: must be positive, got {lam}")
    return steps


def _validate_epsilon_spec(cfg):
    # hermite default: relative to the median cost entry, fraction 1e-2
    eps = _get(cfg, "epsilon", (int, float, dict), required=False,
               default={"mode": "relative", "value": 0.01})
    if isinstance(eps, dict):
        mode = _get(eps, "mode", str, "epsilon.")
        if mode not in ("relative", "absolute"):
            raise ConfigError(f"epsilon.mode: expected relative|absolute, got {mode}")
        _positive(eps, "value", "epsilon.")
    elif not eps > 0:
        raise ConfigError(f"epsilon: must be positive, got {eps}")


def _validate_hermite(cfg, config_dir):
    for key in ("cloud_a", "cloud_b"):
        rel = _get(cfg, key, str)
        if not os.path.exists(os.path.join(config_dir, rel)):
            raise ConfigError(f"{key}: no such file {rel}")
    _validate_epsilon_spec(cfg)
    samples = _get(cfg, "trajectory_samples", int, required=False, default=21)
    if samples < 2:
        raise ConfigError(f"trajectory_samples: must be >= 2, got {samples}")


def _validate_sd(cfg, config_dir):
    g = _validate_grid(cfg)
    times = _get(cfg, "knot_times", list)
    if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("knot_times: need >= 2 strictly increasing times")
    particles = _get(cfg, "particles", int)
    if particles < 1:
        raise ConfigError(f"particles: must be >= 1, got {particles}")
    targets = _get(cfg, "targets", list)
    if not targets:
        raise ConfigError("targets: need at least one constrained knot")
    knots = []
    for i, entry in enumerate(targets):
        where = f"targets[{i}]."
        knot = _get(entry, "knot", int, where)
        if not 0 <= knot < len(times):
            raise ConfigError(f"{where}knot: {knot} outside [0, {len(times) - 1}]")
        knots.append(knot)
        _validate_constraint_source(entry, g["dim"], config_dir, where)
    if sorted(set(knots)) != knots:
        raise ConfigError("targets: knots must be strictly increasing and unique")
    eps = _get(cfg, "epsilons", list)
    if len(eps) != len(targets) or any(not e > 0 for e in eps):
        raise ConfigError("epsilons: one positive value per target required")
    stages = _get(cfg, "stages", list, required=False, default=None)
    if stages is not None:
        for i, st in enumerate(stages):
            se = _get(st, "epsilons", list, f"stages[{i}].")
            if len(se) != len(targets) or any(not e > 0 for e in se):
                raise ConfigError(f"stages[{i}].epsilons: one positive value per target")
            noise = st.get("noise", 0.0)
            if noise < 0:
                raise ConfigError(f"stages[{i}].noise: must be >= 0, got {noise}")
    init = _get(cfg, "init", str, required=False, default="coupled")
    if init not in ("coupled", "quantized-middle", "geodesic", "warm"):
        raise ConfigError(
            f"init: expected coupled|quantized-middle|geodesic|warm, got {init}")
    if init == "coupled" and knots != list(range(len(knots))):
        raise ConfigError("init: coupled start needs targets on knots 0..k "
                          "(unconstrained knots may only trail)")
    if init == "geodesic" and knots != list(range(len(times))):
        raise ConfigError("init: geodesic start needs a target on every knot")
    if init == "warm":
        rel = _get(cfg, "warm_file", str)
        if not os.path.exists(os.path.join(config_dir, rel)):
            raise ConfigError(f"warm_file: no such file {rel}")
    cost = _get(cfg, "cost", str, required=False, default="acceleration")
    if cost not in ("acceleration", "speed"):
        raise ConfigError(f"cost: expected acceleration|speed, got {cost}")
    if cfg.get("solver") == "sd-extrapolate":
        if len(times) != 3:
            raise ConfigError("knot_times: extrapolation bundles have exactly 3 knots")
        if knots != [0, 1]:
            raise ConfigError("targets: extrapolation constrains knots 0 and 1")


def parse_config(path) -> ScenarioConfig:
    """Load and fully validate a scenario config; raises ConfigError."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    version = _get(raw, "schema_version", int)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version}")
    solver = _get(raw, "solver", str)
    if solver not in SOLVERS:
        raise ConfigError(f"solver: expected one of {', '.join(SOLVERS)}, got {solver}")
    seed = _get(raw, "seed", int, required=False, default=0)
    output_dir = _get(raw, "output_dir", str, required=False,
                      default=f"out/{os.path.splitext(os.path.basename(path))[0]}")
    config_dir = os.path.dirname(os.path.abspath(path))
    if solver in ("mm-spline", "mm-geodesic", "mm-extrapolate"):
        _validate_mm(raw, config_dir)
    elif solver == "hermite":
        _validate_hermite(raw, config_dir)
    else:
        _validate_sd(raw, config_dir)
    return ScenarioConfig(solver=solver, raw=raw, config_dir=config_dir,
                          output_dir=output_dir, seed=seed)


# ---------------------------------------------------------------------------
# solver dispatch (engine imports stay inside so thread caps apply first)
# ---------------------------------------------------------------------------

class _Artifacts:
    """Collects written files so the manifest is complete by construction."""

    def __init__(self, outdir):
        self.outdir = outdir
        self.entries = []
        os.makedirs(outdir, exist_ok=True)

    def path(self, name, kind, **meta):
        self.entries.append({"path": name, "kind": kind, **meta})
        return os.path.join(self.outdir, name)

    def write_manifest(self, solver, **meta):
        manifest = {"schema_version": SCHEMA_VERSION, "solver": solver,
                    **meta, "files": self.entries}
        with open(os.path.join(self.outdir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")


def _write_report_csv(path, rows, header="iteration,residual"):
    from .core import _fmt

    with open(path, "w") as f:
        f.write(f"# {header}\n")
        for it, val in rows:
            f.write(f"{it},{_fmt(val)}\n")


def _build_grid(cfg):
    from .core import Grid

    g = cfg["grid"]
    lo = tuple(b[0] for b in g["box"])
    hi = tuple(b[1] for b in g["box"])
    return Grid(g["dim"], g["nx"], lo, hi)


def _build_density(entry, grid, config_dir):
    import numpy as np

    from .core import DensityGrid, GaussianMixtureSpec, rasterize_mixture, read_density_csv

    if "mixture" in entry:
        comps = tuple((c["weight"], tuple(c["mean"]), c["variance"])
                      for c in entry["mixture"]["components"])
        return rasterize_mixture(GaussianMixtureSpec(comps), grid)
    if "density_file" in entry:
        return read_density_csv(os.path.join(config_dir, entry["density_file"]))
    if "uniform" in entry:
        return DensityGrid(grid, np.full(grid.shape, 1.0 / grid.n_nodes))
    w = np.zeros(grid.shape)
    nodes = grid.nodes()
    for d in entry["diracs"]:
        i = int(np.argmin(np.sum((nodes - np.asarray(d["point"])) ** 2, axis=1)))
        w.reshape(-1)[i] += d["weight"]
    return DensityGrid(grid, w / w.sum())


def _run_mm(cfg: ScenarioConfig, outdir, verbose):
    from .core import TimeGrid, write_density_csv
    from .mm_sinkhorn import build_chain_kernel, marginal_at, sinkhorn_solve

    raw = cfg.raw
    grid = _build_grid(raw)
    steps = [int(c["step"]) for c in raw["constraints"]]
    tg = TimeGrid(raw["timegrid"]["n_steps"], raw["timegrid"]["dtau"], tuple(steps))
    constraints = [(int(c["step"]), _build_density(c, grid, cfg.config_dir))
                   for c in raw["constraints"]]
    cost_kind = {"mm-spline": "acceleration", "mm-geodesic": "speed",
                 "mm-extrapolate": "extrapolation"}[cfg.solver]
    lam = raw.get("lambda", tg.dtau) if cost_kind == "extrapolation" else None
    kernel = build_chain_kernel(grid, tg, raw["epsilon"], cost_kind, lam=lam)
    stop = raw.get("stop", {})
    ps, report = sinkhorn_solve(kernel, constraints,
                                tol=stop.get("tol", 1e-7),
                                max_iters=stop.get("max_iters", 5000),
                                log_domain=raw.get("log_domain", False),
                                verbose=verbose)
    art = _Artifacts(outdir)
    for j, rho in constraints:
        write_density_csv(rho, art.path(f"constraint_t{j:03d}.csv", "constraint", step=j,
                                        time=j * tg.dtau))
    for j in range(tg.n_steps):
        m = marginal_at(ps, kernel, j)
        write_density_csv(m, art.path(f"marginal_t{j:03d}.csv", "marginal", step=j,
                                      time=j * tg.dtau))
    _write_report_csv(art.path("report.csv", "report"), report.residual_history)
    art.write_manifest(cfg.solver, grid={"dim": grid.dim, "nx": grid.nx,
                                         "lo": grid.lo, "hi": grid.hi},
                       dtau=tg.dtau, n_steps=tg.n_steps, constrained_steps=steps,
                       epsilon=raw["epsilon"], converged=report.converged,
                       iterations=report.iterations)
    return report


def _run_hermite(cfg: ScenarioConfig, outdir, verbose):
    import numpy as np

    from .core import _fmt, read_cloud_csv
    from .phase_ot import (hermite_paths, most_likely_map, phase_cost_matrix,
                           relative_epsilon, sinkhorn_pairwise)

    raw = cfg.raw
    a = read_cloud_csv(os.path.join(cfg.config_dir, raw["cloud_a"]))
    b = read_cloud_csv(os.path.join(cfg.config_dir, raw["cloud_b"]))
    cost = phase_cost_matrix(a, b)
    eps_spec = raw.get("epsilon", {"mode": "relative", "value": 0.01})
    if isinstance(eps_spec, dict):
        if eps_spec["mode"] == "relative":
            epsilon = relative_epsilon(cost, eps_spec["value"])
        else:
            epsilon = eps_spec["value"]
    else:
        epsilon = float(eps_spec)
    stop = raw.get("stop", {})
    coupling, report = sinkhorn_pairwise(cost, a.weights, b.weights, epsilon,
                                         tol=stop.get("tol", 1e-7),
                                         max_iters=stop.get("max_iters", 5000),
                                         log_domain=raw.get("log_domain", False),
                                         verbose=verbose)
    mapping = most_likely_map(coupling)
    paths = hermite_paths(a, b, mapping)
    art = _Artifacts(outdir)
    with open(art.path("coupling.csv", "coupling"), "w") as f:
        f.write("# i,j,weight\n")
        for i in range(coupling.weights.shape[0]):
            for j in range(coupling.weights.shape[1]):
                w = coupling.weights[i, j]
                if w > 1e-15:
                    f.write(f"{i},{j},{_fmt(w)}\n")
    samples = raw.get("trajectory_samples", 21)
    ts = np.linspace(0.0, 1.0, samples)
    with open(art.path("trajectories.csv", "trajectories"), "w") as f:
        f.write("# particle,t," + ",".join(f"x{k}" for k in range(a.dim)) + "\n")
        for i, path in enumerate(paths):
            pos, _ = path.eval(ts)
            for t, p in zip(ts, pos):
                f.write(f"{i},{_fmt(t)}," + ",".join(_fmt(v) for v in p) + "\n")
    _write_report_csv(art.path("report.csv", "report"), report.residual_history)
    art.write_manifest(cfg.solver, epsilon=epsilon, converged=report.converged,
                       iterations=report.iterations, n_source=a.size, n_target=b.size)
    return report


def _run_sd(cfg: ScenarioConfig, outdir, verbose):
    import numpy as np

    from .core import _fmt, quantize_density
    from .semidiscrete import (OptimizeConfig, PenaltyTarget, Stage, initial_bundle,
                               multiscale_solve, optimize, sd_extrapolate,
                               write_bundle_csv)
    from .splines import CubicPath

    raw = cfg.raw
    grid = _build_grid(raw)
    times = [float(t) for t in raw["knot_times"]]
    n_particles = raw["particles"]
    qseed = raw.get("quantize_seed", 0)
    clouds = []
    for entry in raw["targets"]:
        rho = _build_density(entry, grid, cfg.config_dir)
        clouds.append(quantize_density(rho, n_particles, seed=qseed))
    targets = [PenaltyTarget(entry["knot"], cloud.x, eps)
               for entry, cloud, eps in zip(raw["targets"], clouds, raw["epsilons"])]
    opt_raw = raw.get("optimizer", {})
    opt_cfg = OptimizeConfig(gtol=opt_raw.get("gtol", 1e-6),
                             max_iters=opt_raw.get("max_iters", 2000))
    cost = raw.get("cost", "acceleration")
    init = raw.get("init", "coupled")

    if cfg.solver == "sd-extrapolate":
        bundle0 = None
        if init == "warm":
            from .semidiscrete import read_bundle_csv

            bundle0 = read_bundle_csv(os.path.join(cfg.config_dir, raw["warm_file"]))
        bundle, report = sd_extrapolate(targets, opt_cfg, bundle0=bundle0,
                                        times=times, seed=cfg.seed)
        reports = [report]
    else:
        middle = len(targets) // 2
        if init == "warm":
            bundle0 = initial_bundle("warm", [], times, n_particles,
                                     warm_path=os.path.join(cfg.config_dir,
                                                            raw["warm_file"]))
        elif init in ("quantized-middle", "geodesic"):
            bundle0 = initial_bundle(init, [c.x for c in clouds], times,
                                     n_particles, seed=cfg.seed, middle=middle)
        else:
            bundle0 = initial_bundle("coupled", [c.x for c in clouds], times,
                                     n_particles, seed=cfg.seed,
                                     extend_to=len(times))
        frozen = bool(raw.get("frozen_positions", False))
        stages_raw = raw.get("stages")
        if stages_raw:
            stages = [Stage(epsilons=tuple(s["epsilons"]), noise=s.get("noise", 0.0),
                            max_iters=s.get("max_iters")) for s in stages_raw]
            bundle, reports = multiscale_solve(bundle0, targets, stages, seed=cfg.seed,
                                               config=opt_cfg, cost=cost)
        else:
            bundle, report = optimize(bundle0, targets, opt_cfg, cost=cost,
                                      frozen_positions=frozen)
            reports = [report]

    art = _Artifacts(outdir)
    write_bundle_csv(bundle, art.path("bundle.csv", "bundle"))
    samples = raw.get("trajectory_samples", 33)
    ts = np.linspace(times[0], times[-1], samples)
    with open(art.path("trajectories.csv", "trajectories"), "w") as f:
        f.write("# particle,t," + ",".join(f"x{k}" for k in range(bundle.dim)) + "\n")
        for j in range(bundle.n_particles):
            path = CubicPath(bundle.times, bundle.x[:, j], bundle.v[:, j])
            pos, _ = path.eval(ts)
            for t, p in zip(ts, pos):
                f.write(f"{j},{_fmt(t)}," + ",".join(_fmt(v) for v in p) + "\n")
    history = [(i, v) for i, v in enumerate(
        val for rep in reports for val in rep.objective_history)]
    _write_report_csv(art.path("report.csv", "report"), history,
                      header="iteration,objective")
    final = reports[-1]
    art.write_manifest(cfg.solver, particles=n_particles, knot_times=times,
                       objective=final.objective, grad_norm=final.grad_norm,
                       status=final.status,
                       constrained_knots=[t.knot for t in targets])
    if verbose:
        print(f"[sd] status {final.status}  objective {final.objective:.6g}  "
              f"grad {final.grad_norm:.3e}")
    return final


def run(config_path, out_override=None, verbose=True) -> int:
    """Parse, solve, and write artifacts; returns a process exit code."""
    try:
        cfg = parse_config(config_path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = out_override or cfg.output_dir
    from .mm_sinkhorn import SinkhornDivergence

    try:
        if cfg.solver in ("mm-spline", "mm-geodesic", "mm-extrapolate"):
            _run_mm(cfg, outdir, verbose)
        elif cfg.solver == "hermite":
            _run_hermite(cfg, outdir, verbose)
        else:
            _run_sd(cfg, outdir, verbose)
    except SinkhornDivergence as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    if verbose:
        print(f"artifacts written to {outdir}")
    return EXIT_OK


def validate(config_path) -> int:
    try:
        parse_config(config_path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def main(argv=None) -> int:
    threads = os.environ.get("WASS_SPLINES_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = argparse.ArgumentParser(
        prog="wass-splines",
        description="Spline interpolation and extrapolation of densities")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="solve a scenario and write CSV artifacts")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--quiet", action="store_true",
                       help="suppress the residual-sample log")
    p_val = sub.add_parser("validate", help="validate a config without solving")
    p_val.add_argument("config")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, out_override=args.out, verbose=not args.quiet)
    return validate(args.config)


if __name__ == "__main__":
    sys.exit(main())
