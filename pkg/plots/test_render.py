"""Smoke and behavior tests for the artifact renderer.

Artifacts are produced by running the installed `wass-splines` CLI on every
bundled example config (the renderer is a pure consumer of those files), then
each manifest is rendered through every plot kind that applies to it.
"""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

import render

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG_DIR = os.path.join(HERE, "..", "configs")

BUNDLED = sorted(
    name for name in os.listdir(CONFIG_DIR) if name.endswith(".json"))


@pytest.fixture(scope="session")
def artifact_runs(tmp_path_factory):
    """Run every bundled config once through the CLI; map name -> output dir."""
    base = tmp_path_factory.mktemp("artifacts")
    runs = {}
    for name in BUNDLED:
        outdir = base / name.replace(".json", "")
        proc = subprocess.run(
            [sys.executable, "-m", "wass_splines.cli", "run",
             os.path.join(CONFIG_DIR, name), "--out", str(outdir), "--quiet"],
            capture_output=True, text=True)
        assert proc.returncode == 0, f"{name}: {proc.stderr}"
        runs[name] = str(outdir)
    return runs


def applicable_kinds(outdir):
    manifest = json.load(open(os.path.join(outdir, "manifest.json")))
    kinds = set()
    by_kind = {}
    for e in manifest["files"]:
        by_kind.setdefault(e["kind"], []).append(e)
    if "marginal" in by_kind:
        dim, *_ = render.read_density(os.path.join(outdir, by_kind["marginal"][0]["path"]))
        kinds.add("film" if dim == 1 else "contours")
    if "trajectories" in by_kind:
        kinds.add("trajectories")
    if "report" in by_kind:
        kinds.add("convergence")
    return kinds


def test_secondary_acceptance_all_examples_render(artifact_runs, tmp_path):
    rendered = 0
    for name, outdir in artifact_runs.items():
        for kind in sorted(applicable_kinds(outdir)):
            dest = tmp_path / f"{name}-{kind}"
            code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                                "--kind", kind, "--out", str(dest)])
            assert code == 0, f"{name} kind={kind} exited {code}"
            assert any(f.endswith(".png") for f in os.listdir(dest)), f"{name} {kind}"
            rendered += 1
    print(f"\n[PASS] secondary acceptance: {rendered} renders across "
          f"{len(artifact_runs)} bundled examples, all exit 0")


def test_quartile_contours_q_monotone_containment(artifact_runs):
    outdir = artifact_runs["rotation_2d.json"]
    manifest = json.load(open(os.path.join(outdir, "manifest.json")))
    marg = [e for e in manifest["files"] if e["kind"] == "marginal"]
    for entry in marg[::3]:
        dim, nx, lo, hi, w = render.read_density(os.path.join(outdir, entry["path"]))
        assert dim == 2
        lvl_25 = render.top_mass_level(w, 0.25)
        lvl_50 = render.top_mass_level(w, 0.5)
        assert lvl_50 <= lvl_25
        inner = w >= lvl_25
        outer = w >= lvl_50
        assert np.all(outer[inner])          # superlevel sets nest
        assert w[inner].sum() <= w[outer].sum()
        assert w[inner].sum() >= 0.25 - 1e-9
        assert w[outer].sum() >= 0.5 - 1e-9
    print("\n[PASS] quartile contours satisfy the q-monotonic containment check")


def test_film_empty_time_list_writes_nothing(artifact_runs, tmp_path):
    outdir = artifact_runs["1d_basic_eps_large.json"]
    code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                        "--kind", "film", "--out", str(tmp_path), "--times", ""])
    assert code == 0
    assert not any(f.endswith(".png") for f in os.listdir(tmp_path))


def test_film_subset_of_times(artifact_runs, tmp_path):
    outdir = artifact_runs["1d_basic_eps_large.json"]
    code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                        "--kind", "film", "--out", str(tmp_path),
                        "--times", "0,5,10,15,7,12"])
    assert code == 0
    assert len([f for f in os.listdir(tmp_path) if f.endswith(".png")]) == 6


def test_film_rejects_2d(artifact_runs, tmp_path, capsys):
    outdir = artifact_runs["rotation_2d.json"]
    code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                        "--kind", "film", "--out", str(tmp_path)])
    assert code == 1
    assert "use contour plot" in capsys.readouterr().err


def test_contours_reject_1d(artifact_runs, tmp_path, capsys):
    outdir = artifact_runs["1d_basic_eps_large.json"]
    code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                        "--kind", "contours", "--out", str(tmp_path)])
    assert code == 1
    assert "2D" in capsys.readouterr().err


def test_contours_two_runs_overlay(artifact_runs, tmp_path):
    a = artifact_runs["rotation_2d.json"]
    b = artifact_runs["rotation_2d_speed.json"]
    code = render.main(["--manifest", os.path.join(a, "manifest.json"),
                        "--manifest2", os.path.join(b, "manifest.json"),
                        "--kind", "contours", "--out", str(tmp_path)])
    assert code == 0
    assert os.path.exists(tmp_path / "contours.png")


def test_contours_huge_stride_single_level(artifact_runs, tmp_path):
    outdir = artifact_runs["rotation_2d.json"]
    code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                        "--kind", "contours", "--out", str(tmp_path),
                        "--stride", "999"])
    assert code == 0
    manifest = json.load(open(os.path.join(outdir, "manifest.json")))
    marg = [e for e in manifest["files"] if e["kind"] == "marginal"]
    assert len(marg[::999]) == 1


def test_convergence_two_reports(artifact_runs, tmp_path):
    a = artifact_runs["rotation_2d.json"]
    b = artifact_runs["rotation_2d_speed.json"]
    code = render.main(["--manifest", os.path.join(a, "manifest.json"),
                        "--manifest2", os.path.join(b, "manifest.json"),
                        "--kind", "convergence", "--out", str(tmp_path)])
    assert code == 0
    assert os.path.exists(tmp_path / "convergence.png")


def test_malformed_report_names_line(tmp_path):
    bad = tmp_path / "report.csv"
    bad.write_text("# iteration,residual\n10,0.5\nbroken line\n")
    with pytest.raises(render.ArtifactError, match="line 3"):
        render.read_report(str(bad))


def test_empty_report_errors(tmp_path):
    empty = tmp_path / "report.csv"
    empty.write_text("# iteration,residual\n")
    with pytest.raises(render.ArtifactError, match="empty report"):
        render.read_report(str(empty))


def test_missing_marginal_named(artifact_runs, tmp_path, capsys):
    outdir = artifact_runs["1d_basic_eps_large.json"]
    code = render.main(["--manifest", os.path.join(outdir, "manifest.json"),
                        "--kind", "film", "--out", str(tmp_path),
                        "--times", "999"])
    assert code == 1
    assert "999" in capsys.readouterr().err


def test_manifest_with_missing_file_rejected(artifact_runs, tmp_path, capsys):
    src = artifact_runs["hermite_clouds.json"]
    manifest = json.load(open(os.path.join(src, "manifest.json")))
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    code = render.main(["--manifest", str(tmp_path / "manifest.json"),
                        "--kind", "convergence", "--out", str(tmp_path)])
    assert code == 1
    assert "missing file" in capsys.readouterr().err


def test_script_runs_standalone(artifact_runs, tmp_path):
    outdir = artifact_runs["sd_extrapolate_merge.json"]
    proc = subprocess.run(
        [sys.executable, os.path.join(HERE, "render.py"),
         "--manifest", os.path.join(outdir, "manifest.json"),
         "--kind", "trajectories", "--out", str(tmp_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "trajectories.png" in proc.stdout
