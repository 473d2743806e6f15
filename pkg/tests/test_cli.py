import csv
import json
from pathlib import Path

import numpy as np
import pytest

from birthdeath.cli import _Output, main
from birthdeath.errors import DomainError
from birthdeath.exact import mfpt_backward_solve

MODELS = Path(__file__).resolve().parent.parent / "models"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_stationary(tmp_path):
    assert run_cli("stationary", "--model", MODELS / "poisson.json", "--V", 100, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "stationary.csv")
    assert list(rows[0]) == ["n", "x", "log_p", "p", "Phi"]
    assert sum(float(r["p"]) for r in rows) == pytest.approx(1.0, abs=1e-12)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "stationary" and manifest["outputs"] == ["stationary.csv"]
    assert "version" in manifest and manifest["config"]["V"] == 100


def test_potential(tmp_path):
    assert run_cli("potential", "--model", "builtin:schlogl", "--x-max", 3, "--points", 31,
                   "--V", 50, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "potential.csv")
    assert len(rows) == 31 and list(rows[0]) == ["x", "phi0", "phi1", "Phi_at_V"]


def test_mfpt_all_methods(tmp_path):
    code = run_cli("mfpt", "--model", MODELS / "schlogl.json", "--V", 100, "--from-basin", "lower",
                   "--to", "past-barrier", "--methods", "exact,asymptotic,kramers,mc",
                   "--replicas", 1000, "--out", tmp_path, "--threads", 2)
    assert code == 0
    report = json.loads((tmp_path / "mfpt.json").read_text())
    est = report["estimates"]
    assert set(est) == {"exact", "asymptotic", "kramers", "mc"}
    from birthdeath.model import load_model
    oracle = mfpt_backward_solve(load_model(MODELS / "schlogl.json"), 100,
                                 report["n_from"], report["n_to"])
    assert est["exact"]["time"] == pytest.approx(oracle, rel=1e-9)
    assert est["mc"]["replicas"] == 1000
    assert abs(est["mc"]["mean"] - est["exact"]["time"]) < 4 * est["mc"]["stderr"]


def test_mfpt_leftward(tmp_path):
    code = run_cli("mfpt", "--model", "builtin:schlogl", "--V", 30, "--from-basin", "upper",
                   "--to", "past-barrier", "--methods", "exact,asymptotic,kramers",
                   "--x-range", "0:4", "--out", tmp_path)
    assert code == 0
    est = json.loads((tmp_path / "mfpt.json").read_text())["estimates"]
    assert est["exact"]["time"] > 0 and "skipped" in est["asymptotic"]
    assert est["kramers"]["time"] > 0


def test_simulate_and_replay(tmp_path):
    first = tmp_path / "first"
    assert run_cli("simulate", "--model", "builtin:poisson", "--V", 50, "--n0", 5, "--t-max", 3,
                   "--seed", 12, "--out", first) == 0
    rows = read_csv(first / "trajectory.csv")
    states = np.array([int(r["n"]) for r in rows])
    assert states[0] == 5 and np.all(np.abs(np.diff(states)) == 1)
    second = tmp_path / "second"
    assert run_cli("replay", first / "manifest.json", "--out", second) == 0
    assert (first / "trajectory.csv").read_text() == (second / "trajectory.csv").read_text()


def test_scan_finds_one_maxwell_row(tmp_path):
    assert run_cli("scan", "--model", MODELS / "schlogl.json", "--param", "mu",
                   "--range", "0.5:1.5:200", "--x-range", "0:4", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "phase.csv")
    assert sum(r["row_type"] == "maxwell" for r in rows) == 1
    records = [json.loads(l) for l in (tmp_path / "events.jsonl").read_text().splitlines()]
    assert sum(r["record"] == "maxwell" for r in records) == 1
    assert sum(r["record"] == "bifurcation" for r in records) == 1  # only the upper saddle-node


def test_scan_wrong_parameter(tmp_path):
    assert run_cli("scan", "--model", "builtin:schlogl", "--param", "k9", "--range", "0:1:5",
                   "--out", tmp_path) == 2


def test_decompose(tmp_path):
    assert run_cli("decompose", "--model", "builtin:poisson", "--V", 100,
                   "--x-grid", "0:1.5:16", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "vanthoff.csv")
    assert float(rows[0]["x"]) > 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["summary"]["max_identity_residual"] < 1e-10


def test_diffusion_compare(tmp_path):
    assert run_cli("diffusion-compare", "--model", "builtin:schlogl", "--V", 100,
                   "--x-grid", "0.05:3:20", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "diffusion.csv")
    assert list(rows[0]) == ["x", "D_km", "D_hgtt", "D_tilde", "b", "phi0_prime",
                             "gradient_km", "gradient_hgtt"]
    assert len(rows) == 20


def test_unknown_command_is_usage_error(capsys):
    assert run_cli("frobnicate") == 64
    assert run_cli() == 64


def test_missing_model_is_validation_error(tmp_path):
    assert run_cli("stationary", "--model", tmp_path / "nope.json", "--V", 10,
                   "--out", tmp_path) == 2


def test_numerical_failure_exit_code(tmp_path):
    # the chain is absorbed at 0, so the upward passage never completes
    assert run_cli("mfpt", "--model", "builtin:keizer", "--V", 20, "--from-state", 0,
                   "--to", 10, "--out", tmp_path) == 3


def test_output_guard(tmp_path):
    out = _Output(tmp_path / "run")
    with pytest.raises(DomainError):
        out.path("../escape.csv")
    with pytest.raises(DomainError):
        out.path("nested/file.csv")
    assert not (tmp_path / "escape.csv").exists()


def test_env_threads_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DGP_THREADS", "2")
    assert run_cli("mfpt", "--model", "builtin:poisson", "--V", 20, "--from-state", 10,
                   "--to", 14, "--methods", "mc", "--replicas", 200, "--threads", 7,
                   "--out", tmp_path) == 0
