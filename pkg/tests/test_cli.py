import json
import subprocess
import sys

import pytest

from qadmm.bench import ExperimentConfig, build_problem, load_config
from qadmm.cli import main


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({"M": 10, "N": 4, "H": 8, "rho": 50.0, "tau": 3, "trials": 2, "max_iters": 12}))
    return path


def test_run_writes_outputs(small_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(small_config), "--out", str(out), "--q", "4"]) == 0
    written = sorted(p.name for p in out.iterdir())
    assert written == ["aggregate.csv", "config.json", "summary.csv", "trial_0.csv", "trial_1.csv"]
    assert load_config(out / "config.json").q == 4
    assert "qadmm" in capsys.readouterr().out


def test_fstar_prints_reference_value(small_config, capsys):
    assert main(["fstar", str(small_config), "--trial", "1"]) == 0
    printed = float(capsys.readouterr().out.strip())
    cfg = load_config(small_config)
    assert printed == build_problem(cfg, 1)[2].F_star


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"M": 10, "N": 4, "H": 8, "q": 1}')
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "q" in capsys.readouterr().err


def test_override_validation(small_config, tmp_path, capsys):
    assert main(["run", str(small_config), "--out", str(tmp_path / "o"), "--tau", "0"]) == 2
    assert "tau" in capsys.readouterr().err


def test_selftest_subcommand(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_module_entry_point(small_config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qadmm", "fstar", str(small_config)],
                          capture_output=True, text=True, check=True)
    assert float(proc.stdout) > 0


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    lasso = load_config(root / "lasso.json")
    assert (lasso.M, lasso.rho, lasso.theta, lasso.N, lasso.H, lasso.q, lasso.tau) == (200, 500.0, 0.1, 16, 100, 3, 3)
    assert isinstance(load_config(root / "logistic.json"), ExperimentConfig)
