import shutil
import subprocess

import numpy as np
import pytest
import yaml

from bilevel_flow import BilevelProblem
from bilevel_flow.cli import main

BASE = dict(
    problem={"name": "toy1"},
    solver="sgf",
    alpha=1.0,
    integrator={"dt": 0.05, "horizon": 2.0},
    init={"kind": "explicit", "x0": [0.0], "y0": [1.0]},
    seed=0,
)


def write_config(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_run_success_exit_zero(tmp_path, capsys):
    path = write_config(tmp_path, BASE)
    code = main(["run", path, "--out", str(tmp_path / "out")])
    assert code == 0
    assert "stop_reason=horizon" in capsys.readouterr().out
    assert (tmp_path / "out" / "summary.json").exists()


def test_run_rejects_sweep_section(tmp_path):
    path = write_config(tmp_path, {**BASE, "sweep": {"alpha": [0.1, 1.0]}})
    assert main(["run", path]) == 2


def test_config_error_exit_two(tmp_path):
    bad = dict(BASE)
    del bad["alpha"]
    assert main(["run", write_config(tmp_path, bad)]) == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_seed_override(tmp_path, capsys):
    path = write_config(tmp_path, BASE)
    assert main(["run", path, "--seed", "7"]) == 0
    assert "seed=7" in capsys.readouterr().out


def test_solver_error_exit_one(tmp_path, monkeypatch):
    import bilevel_flow.harness as harness

    def degenerate(spec, default_seed=0):
        def upper(x, y):
            return 0.0, np.zeros(1), np.zeros(1)

        def lower(x, y):
            return 0.0, np.ones(1), np.zeros((1, 1)), np.zeros((1, 1))

        return BilevelProblem("toy1", 1, 1, upper, lower)

    monkeypatch.setattr(harness, "build_problem", degenerate)
    path = write_config(tmp_path, {**BASE, "solver": "compact"})
    assert main(["run", path]) == 1


def test_grid_subcommand(tmp_path, capsys):
    data = {**BASE, "sweep": {"alpha": [0.5, 1.0]}}
    path = write_config(tmp_path, data)
    code = main(["grid", path, "--out", str(tmp_path / "grid")])
    assert code == 0
    assert "2/2 cells succeeded" in capsys.readouterr().out
    assert (tmp_path / "grid" / "grid.csv").exists()


def test_grid_requires_sweep(tmp_path):
    assert main(["grid", write_config(tmp_path, BASE)]) == 2


def test_grid_parallel_jobs(tmp_path, capsys):
    data = {**BASE, "sweep": {"alpha": [0.5, 1.0]}}
    path = write_config(tmp_path, data)
    code = main(["grid", path, "--out", str(tmp_path / "grid"), "--jobs", "2"])
    assert code == 0
    assert (tmp_path / "grid" / "alpha=0.5" / "summary.json").exists()


def test_check_subcommand(tmp_path, capsys):
    assert main(["check", write_config(tmp_path, BASE)]) == 0
    out = capsys.readouterr().out
    assert "finite differences" in out and "FAIL" not in out


def test_check_quadratic_problem(tmp_path):
    data = {**BASE, "problem": {"name": "quadratic_ll", "params": {"n": 5, "m": 5}},
            "init": {"kind": "random"}}
    assert main(["check", write_config(tmp_path, data)]) == 0


@pytest.mark.skipif(shutil.which("bilevel-flow") is None,
                    reason="console script not on PATH")
def test_console_script_smoke(tmp_path):
    path = write_config(tmp_path, BASE)
    proc = subprocess.run(["bilevel-flow", "check", path], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
