from __future__ import annotations

import shutil
import subprocess
import sys

import pytest

from microsim.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, main
from microsim.scenarios import builtin_path


def test_run_minimal_writes_outputs(tmp_path, capsys):
    assert main(["run", "--scenario", "minimal", "--out", str(tmp_path)]) == EXIT_OK
    out, err = capsys.readouterr()
    assert "requests" in out and err == ""
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "requests.csv", "rps.csv", "scaling.csv", "summary.txt", "usage.csv",
    ]


def test_run_from_explicit_files(tmp_path, capsys):
    d = builtin_path("minimal")
    argv = ["run", "--application", str(d / "application.json"), "--instances", str(d / "instances.yaml"),
            "--cluster", str(d / "cluster.json"), "--config", str(d / "scenario.toml"),
            "--seed", "3", "--policy", "horizontal", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert "horizontal" in capsys.readouterr().out


def test_out_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MICROSIM_OUT", str(tmp_path / "env"))
    assert main(["run", "--scenario", "minimal"]) == EXIT_OK
    assert (tmp_path / "env" / "requests.csv").exists()


def test_scenario_with_config_override(tmp_path, capsys):
    cfg = tmp_path / "short.toml"
    cfg.write_text("num_clients = 2\nspawn_rate = 1\nwait_interval = [1, 2]\ntime_limit = 5\n")
    assert main(["run", "--scenario", "minimal", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK


@pytest.mark.parametrize("argv", [
    ["run", "--scenario", "nowhere"],
    ["run", "--scenario", "minimal", "--policy", "diagonal"],
    ["run", "--application", "x.json"],
    ["run", "--scenario", "minimal", "--cluster", "c.json"],
    ["validate", "--scenario", "minimal", "--config", "/nonexistent.toml"],
    ["predict", "10", "1", "5", "3"],
    ["predict", "10", "1", "1", "3", "-t", "-2"],
])
def test_config_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_CONFIG
    out, err = capsys.readouterr()
    assert out == "" or argv[0] == "predict"
    assert "error" in err


def test_broken_scenario_dir(tmp_path, capsys):
    shutil.copytree(builtin_path("minimal"), tmp_path / "s")
    (tmp_path / "s" / "application.json").write_text('{"apis": [], "services": []}')
    assert main(["validate", "--scenario", str(tmp_path / "s")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "application.json" in err and "$.apis" in err


def test_invariant_violation_exits_2(monkeypatch, capsys):
    from microsim import simulation
    from microsim.policies import InvariantViolation

    def boom(self, wall_budget=None):
        raise InvariantViolation("ledger drift")

    monkeypatch.setattr(simulation.Simulation, "run", boom)
    assert main(["run", "--scenario", "minimal"]) == EXIT_INVARIANT
    assert "ledger drift" in capsys.readouterr().err


def test_validate_and_predict_and_bench(capsys):
    assert main(["validate", "--scenario", "sockshop"]) == EXIT_OK
    assert "POST /orders: 4 chains, 8 cloudlets per request" in capsys.readouterr().out
    assert main(["predict", "1000", "100", "5", "15", "-t", "5", "-t", "60"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[1].split() == ["5", "500.00", "50.000", "125.00"]
    assert out[2].split() == ["60", "1000.00", "100.000", "5500.00"]
    assert main(["bench", "smoke"]) == EXIT_OK
    assert "completed requests 100" in capsys.readouterr().out


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "microsim.cli", "predict", "10", "1", "1", "3", "-t", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stderr == ""
    proc = subprocess.run([sys.executable, "-m", "microsim.cli", "run", "--scenario", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stdout == "" and "nope" in proc.stderr
