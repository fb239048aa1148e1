#!/usr/bin/env python3
"""Render figures from solver CSV artifacts.

Reads only the documented artifact formats (manifest.json plus density,
trajectory, and report CSVs) written by the `wass-splines run` command; no
solver bindings.  Four figure kinds:

  film          one panel per requested time: the reconstructed 1D marginal
                (dotted) with the constraint density overlaid (solid) at
                constrained steps
  contours      overlaid top-mass level curves of 2D marginals every
                `stride` steps; a second run renders dashed
  trajectories  particle paths from a trajectory CSV (position space in 2D,
                time-position in 1D)
  convergence   residual samples against iteration on a log scale; a second
                report adds a labeled curve

Usage: render.py --manifest <path> --kind <kind> --out <dir>
       [--manifest2 <path>] [--times 0,3,7] [--q 0.25] [--stride 2]
"""
import argparse
import json
import os
import sys

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


class ArtifactError(RuntimeError):
    pass


class ArtifactSet:
    """Manifest plus resolved artifact file lists."""

    def __init__(self, manifest_path):
        if not os.path.exists(manifest_path):
            raise ArtifactError(f"missing manifest: {manifest_path}")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        self.base = os.path.dirname(os.path.abspath(manifest_path))
        self.solver = self.manifest.get("solver", "?")
        for entry in self.manifest["files"]:
            if not os.path.exists(self.resolve(entry["path"])):
                raise ArtifactError(f"manifest lists missing file: {entry['path']}")

    def resolve(self, name):
        return os.path.join(self.base, name)

    def of_kind(self, kind):
        return [e for e in self.manifest["files"] if e["kind"] == kind]

    def marginals(self):
        return sorted(self.of_kind("marginal"), key=lambda e: e.get("step", 0))

    def constraint_at(self, step):
        for e in self.of_kind("constraint"):
            if e.get("step") == step:
                return e
        return None


def read_density(path):
    """Parse a density CSV: `# dim,nx,lo...,hi...` header then weights."""
    if not os.path.exists(path):
        raise ArtifactError(f"missing marginal file: {path}")
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ArtifactError(f"{path}: missing density header")
    fields = lines[0].lstrip("# ").split(",")
    dim, nx = int(fields[0]), int(fields[1])
    lo = [float(v) for v in fields[2:2 + dim]]
    hi = [float(v) for v in fields[2 + dim:2 + 2 * dim]]
    w = np.array([float(v) for v in lines[1:]])
    if w.size != nx**dim:
        raise ArtifactError(f"{path}: expected {nx**dim} weights, found {w.size}")
    return dim, nx, lo, hi, w


def read_report(path):
    """Parse a report CSV of (iteration, value) rows; names the bad line."""
    if not os.path.exists(path):
        raise ArtifactError(f"missing report file: {path}")
    label = "residual"
    rows = []
    with open(path) as f:
        for lineno, ln in enumerate(f, start=1):
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith("#"):
                parts = ln.lstrip("# ").split(",")
                if len(parts) == 2:
                    label = parts[1]
                continue
            try:
                it, val = ln.split(",")
                rows.append((int(it), float(val)))
            except ValueError:
                raise ArtifactError(f"{path}: malformed CSV at line {lineno}: {ln!r}")
    if not rows:
        raise ArtifactError(f"{path}: empty report, no residual samples")
    return label, rows


def read_trajectories(path):
    """Parse a trajectory CSV of (particle, t, x...) rows."""
    if not os.path.exists(path):
        raise ArtifactError(f"missing trajectory file: {path}")
    by_particle = {}
    with open(path) as f:
        for lineno, ln in enumerate(f, start=1):
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            try:
                vals = [float(v) for v in ln.split(",")]
                pid = int(vals[0])
            except ValueError:
                raise ArtifactError(f"{path}: malformed CSV at line {lineno}: {ln!r}")
            by_particle.setdefault(pid, []).append(vals[1:])
    if not by_particle:
        raise ArtifactError(f"{path}: no trajectory rows")
    return {pid: np.array(rows) for pid, rows in by_particle.items()}


def top_mass_level(weights, q):
    """Largest threshold whose superlevel set carries at least q of the mass."""
    ws = np.sort(weights.reshape(-1))[::-1]
    cs = np.cumsum(ws)
    idx = int(np.searchsorted(cs, q * cs[-1] - 1e-12, side="left"))
    return float(ws[min(idx, ws.size - 1)])


def plot_density_film(artifacts, times, outdir):
    """One panel per requested time index; 1D only."""
    entries = artifacts.marginals()
    if not entries:
        raise ArtifactError("no marginal artifacts in manifest")
    by_step = {e.get("step"): e for e in entries}
    written = []
    for step in times:
        entry = by_step.get(step)
        if entry is None:
            raise ArtifactError(f"missing marginal file for time step {step}")
        dim, nx, lo, hi, w = read_density(artifacts.resolve(entry["path"]))
        if dim != 1:
            raise ArtifactError("2D marginals: use contour plot")
        xs = np.linspace(lo[0], hi[0], nx)
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(xs, w, "k:", lw=1.4, label="reconstructed")
        cons = artifacts.constraint_at(step)
        if cons is not None:
            _, _, _, _, cw = read_density(artifacts.resolve(cons["path"]))
            ax.plot(xs, cw, "-", color="tab:blue", lw=1.2, label="constraint")
            ax.legend(fontsize=7)
        ax.set_xlabel("x")
        ax.set_ylabel("weight")
        ax.set_title(f"t = {entry.get('time', step)}")
        fig.tight_layout()
        out = os.path.join(outdir, f"film_t{step:03d}.png")
        fig.savefig(out, dpi=110)
        plt.close(fig)
        written.append(out)
    return written


def plot_quartile_contours(artifacts, q, stride, outdir, second=None):
    """Overlaid superlevel contours of 2D marginals every `stride` steps."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    for art, style in ((artifacts, "solid"), (second, "dashed")):
        if art is None:
            continue
        entries = art.marginals()
        if not entries:
            raise ArtifactError("no marginal artifacts in manifest")
        picked = entries[::max(1, stride)]
        cmap = plt.get_cmap("viridis")
        for k, entry in enumerate(picked):
            dim, nx, lo, hi, w = read_density(art.resolve(entry["path"]))
            if dim != 2:
                raise ArtifactError("contour plot needs 2D marginals")
            level = top_mass_level(w, q)
            xs = np.linspace(lo[0], hi[0], nx)
            ys = np.linspace(lo[1], hi[1], nx)
            grid_w = w.reshape(nx, nx)
            color = cmap(k / max(1, len(picked) - 1))
            ax.contour(xs, ys, grid_w.T, levels=[level], colors=[color],
                       linestyles=style, linewidths=1.2)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal")
    ax.set_title(f"top-{q:g} mass level curves")
    fig.tight_layout()
    out = os.path.join(outdir, "contours.png")
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def plot_trajectories(artifacts, outdir):
    entries = artifacts.of_kind("trajectories")
    if not entries:
        raise ArtifactError("no trajectory artifacts in manifest")
    paths = read_trajectories(artifacts.resolve(entries[0]["path"]))
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    d = next(iter(paths.values())).shape[1] - 1
    for pid, rows in paths.items():
        if d == 1:
            ax.plot(rows[:, 0], rows[:, 1], lw=0.7, alpha=0.7)
        else:
            ax.plot(rows[:, 1], rows[:, 2], lw=0.7, alpha=0.7)
    if d == 1:
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    else:
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_aspect("equal")
    ax.set_title(f"{len(paths)} particle trajectories")
    fig.tight_layout()
    out = os.path.join(outdir, "trajectories.png")
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def plot_convergence(report_paths, outdir, labels=None):
    if labels is None:
        labels = [f"run {k + 1}" for k in range(len(report_paths))]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ylabel = "residual"
    for path, label in zip(report_paths, labels):
        ylabel, rows = read_report(path)
        its = [r[0] for r in rows]
        vals = [max(r[1], 1e-300) for r in rows]
        ax.semilogy(its, vals, marker=".", ms=3, lw=1.0, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if len(report_paths) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = os.path.join(outdir, "convergence.png")
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--kind", required=True,
                        choices=["film", "contours", "trajectories", "convergence"])
    parser.add_argument("--out", required=True)
    parser.add_argument("--manifest2", default=None,
                        help="second run overlay (contours dashed / convergence)")
    parser.add_argument("--times", default=None,
                        help="comma-separated time-step indices for the film "
                             "(default: all; empty string renders nothing)")
    parser.add_argument("--q", type=float, default=0.25,
                        help="top-mass fraction for the contour level")
    parser.add_argument("--stride", type=int, default=2)
    args = parser.parse_args(argv)

    try:
        art = ArtifactSet(args.manifest)
        art2 = ArtifactSet(args.manifest2) if args.manifest2 else None
        os.makedirs(args.out, exist_ok=True)
        if args.kind == "film":
            if args.times is None:
                times = [e.get("step") for e in art.marginals()]
            elif args.times.strip() == "":
                times = []
            else:
                times = [int(v) for v in args.times.split(",")]
            written = plot_density_film(art, times, args.out)
            for w in written:
                print(w)
        elif args.kind == "contours":
            print(plot_quartile_contours(art, args.q, args.stride, args.out, second=art2))
        elif args.kind == "trajectories":
            print(plot_trajectories(art, args.out))
        else:
            reports = [art.resolve(e["path"]) for e in art.of_kind("report")]
            labels = [art.solver]
            if art2 is not None:
                reports += [art2.resolve(e["path"]) for e in art2.of_kind("report")]
                labels += [art2.solver]
            if not reports:
                raise ArtifactError("no report artifacts in manifest")
            print(plot_convergence(reports, args.out, labels))
    except ArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
