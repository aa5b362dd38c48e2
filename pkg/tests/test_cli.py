import csv
import json
import math
import subprocess
import sys

import pytest

from liquidation import cli
from liquidation.cara import CaraConvergenceError, quadratic_closed_form

QUAD = {"model": {"sigma": [[0.3]], "b": [0.0], "T": 1.0, "X0": [10.0], "R0": 0.0},
        "impact": {"kind": "quadratic", "lambda": 0.5},
        "utility": {"kind": "cara", "A": 1.0},
        "grid": {"L": 3, "x_box": [[-2.0, 12.0, 0.5]], "N_r": 16.0}}


@pytest.fixture
def quad_config(tmp_path):
    path = tmp_path / "quad.json"
    path.write_text(json.dumps(QUAD))
    return path


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_default(capsys):
    assert cli.main(["validate"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "drift_in_range" in out and "grid: L=7" in out


def test_solve_cara_matches_closed_form(quad_config, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["solve-cara", str(quad_config), "--out", str(out)]) == cli.EXIT_OK
    row = _csv(out / "cara.csv")[0]
    exact, _ = quadratic_closed_form(1.0, 0.3, 0.5, 1.0, 10.0)
    assert float(row["closed_form_cost"]) == pytest.approx(exact, rel=1e-14)
    assert abs(float(row["cost"]) - exact) / exact <= 1e-3
    strategy = _csv(out / "cara_strategy_A1.csv")
    assert len(strategy) == 2001 and float(strategy[-1]["x1"]) == 0.0


def test_broken_drift_names_the_field(tmp_path, capsys):
    doc = {"model": {"sigma": [[0.3, 0.0], [0.0, 0.0]], "b": [0.1, 0.2], "T": 1.0,
                     "X0": [1.0, 1.0]},
           "impact": {"kind": "quadratic", "lambda": 0.5}, "utility": {"kind": "cara", "A": 1.0},
           "grid": {"x_box": [[-1.0, 2.0, 0.5], [-1.0, 2.0, 0.5]]}}
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(doc))
    assert cli.main(["validate", str(path)]) == cli.EXIT_CONFIG
    assert "model.b" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["validate", "/nonexistent.json"], ["frobnicate"],
                                  ["solve-cara", "--steps", "many"]])
def test_usage_errors_exit_one(argv, capsys):
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_thread_count_from_environment(monkeypatch):
    args = cli.build_parser().parse_args(["validate"])
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli._threads(args) == 3
    args = cli.build_parser().parse_args(["validate", "--threads", "2"])
    assert cli._threads(args) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "lots")
    with pytest.raises(cli.UsageError):
        cli._threads(cli.build_parser().parse_args(["validate"]))


def test_non_convergence_exits_three(monkeypatch, quad_config, tmp_path, capsys):
    def fail(*args, **kwargs):
        raise CaraConvergenceError("no progress", 1.0)

    monkeypatch.setattr(cli, "solve_cara", fail)
    code = cli.main(["solve-cara", str(quad_config), "--out", str(tmp_path)])
    assert code == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_failed_check_exits_two(monkeypatch, quad_config, tmp_path):
    class Failed:
        passed = False

        def scoreboard_text(self):
            return "overall: FAIL\n"

    monkeypatch.setattr(cli, "run_verification", lambda *a, **k: Failed())
    assert cli.main(["verify", str(quad_config), "--quiet", "--out", str(tmp_path)]) == \
        cli.EXIT_CHECK


def test_solve_dp_and_simulate_from_surface(quad_config, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["solve-dp", str(quad_config), "--out", str(out), "--format", "json"]) == 0
    row = json.loads((out / "dp.json").read_text())[0]
    assert row["relative_gap"] < 0.1 and row["L"] == 3
    assert cli.main(["simulate", str(quad_config), "--surface", str(out / "surface.bin"),
                     "--paths", "200", "--out", str(out)]) == 0
    summary = _csv(out / "sim_summary.csv")[0]
    assert int(summary["paths"]) == 200
    assert len(_csv(out / "sim.csv")) == 200


def test_simulate_is_reproducible(quad_config, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", str(quad_config), "--cara", "1", "--paths", "100",
                         "--steps", "20", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "sim.csv").read_bytes() == (tmp_path / "b" / "sim.csv").read_bytes()


def test_sweep_over_horizon(quad_config, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["sweep", str(quad_config), "--param", "model.T", "--values", "0.5,1",
                     "--out", str(out)]) == 0
    rows = _csv(out / "sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.5, 1.0]
    for r in rows:
        assert float(r["V_upper"]) - 1.0 == pytest.approx(float(r["V_lower"]), rel=1e-12)


def test_sweep_rejects_bad_values(quad_config, tmp_path):
    assert cli.main(["sweep", str(quad_config), "--param", "model.T", "--values", "a,b",
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", str(quad_config), "--param", "model.sigma.0.5", "--values", "1",
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_plot_heatmap(quad_config, tmp_path):
    assert cli.main(["plot", str(quad_config), "--kind", "heatmap", "--layers", "0,4",
                     "--out", str(tmp_path)]) == 0
    assert (tmp_path / "heatmap_layer004.svg").read_text().count("<!-- data:") == 1
    assert cli.main(["plot", str(quad_config), "--kind", "heatmap", "--layers", "99",
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_module_entry_point(quad_config):
    proc = subprocess.run([sys.executable, "-m", "liquidation", "validate", str(quad_config)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert math.isfinite(float(proc.stdout.split("residual=")[1].split()[0]))
