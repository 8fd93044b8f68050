import json
import os

import pytest

from gridstate.cli import main, prepare, run_trial


def test_powerflow_command(capsys):
    assert main(["powerflow"]) == 0
    out = capsys.readouterr().out
    assert "converged in" in out and "30" in out


def test_powerflow_missing_file(capsys):
    assert main(["powerflow", "--case", "/nonexistent/path.case"]) == 3
    assert "i/o error" in capsys.readouterr().err


def test_powerflow_bad_tolerance(capsys):
    assert main(["powerflow", "--tol", "0"]) == 1
    assert "error" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, capsys):
    case = tmp_path / "infeasible.case"
    case.write_text(
        "BASEMVA 100\n"
        "BUS 1 slack 1.0 0.0 0 0 0 0\n"
        "BUS 2 load 1.0 0.0 -9.0 -3.0 0 0\n"
        "BRANCH 1 2 0.01 0.1 0.0 1.0 0.0\n"
    )
    assert main(["powerflow", "--case", str(case)]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_log_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("GRIDSTATE_LOG", "DEBUG")
    assert main(["powerflow"]) == 0


def test_estimate_writes_deterministic_files(tmp_path, capsys):
    args = [
        "estimate", "--partition", "ieee30.areas", "--mode", "multiarea-robust",
        "--seed", "7", "--uncertainty", "0.05,0.05",
        "--out", str(tmp_path / "a"), "--format", "csv",
    ]
    assert main(args) == 0
    args2 = list(args)
    args2[args2.index(str(tmp_path / "a"))] = str(tmp_path / "b")
    assert main(args2) == 0
    fa = (tmp_path / "a" / "estimate_multiarea-robust.csv").read_bytes()
    fb = (tmp_path / "b" / "estimate_multiarea-robust.csv").read_bytes()
    assert fa == fb
    assert b"bus" in fa


def test_estimate_json_output(tmp_path):
    assert main([
        "estimate", "--partition", "ieee30.areas", "--mode", "multiarea-wls",
        "--seed", "1", "--out", str(tmp_path), "--format", "json",
    ]) == 0
    data = json.loads((tmp_path / "estimate_multiarea-wls.json").read_text())
    assert len(data["rows"]) == 30
    assert data["manifest"]["seed"] == 1


def test_estimate_multiarea_needs_partition(capsys):
    assert main(["estimate", "--mode", "multiarea-wls"]) == 1
    assert "partition" in capsys.readouterr().err


def test_zero_uncertainty_modes_agree(tmp_path):
    base = ["estimate", "--partition", "ieee30.areas", "--seed", "3",
            "--uncertainty", "0,0", "--format", "json"]
    assert main(base + ["--mode", "multiarea-robust", "--out", str(tmp_path / "r")]) == 0
    assert main(base + ["--mode", "multiarea-wls", "--out", str(tmp_path / "w")]) == 0
    ra = json.loads((tmp_path / "r" / "estimate_multiarea-robust.json").read_text())
    wa = json.loads((tmp_path / "w" / "estimate_multiarea-wls.json").read_text())
    for row_r, row_w in zip(ra["rows"], wa["rows"]):
        assert row_r[:5] == pytest.approx(row_w[:5], abs=1e-10)


def test_compare_identical_configs_zero_difference(tmp_path, capsys):
    cfg = tmp_path / "same.cfg"
    cfg.write_text("partition = ieee30.areas\nmode = multiarea-wls\ntrials = 1\nseed = 5\n")
    assert main([
        "compare", "--config-a", str(cfg), "--config-b", str(cfg),
        "--out", str(tmp_path), "--format", "json",
    ]) == 0
    out = capsys.readouterr().out
    assert "win rate" in out and "not statistically meaningful" in out
    data = json.loads((tmp_path / "compare.json").read_text())
    for row in data["rows"]:
        assert row[1] == row[3] and row[2] == row[4]


def test_compare_robust_vs_wls(tmp_path, capsys):
    a = tmp_path / "robust.cfg"
    a.write_text("partition = ieee30.areas\nmode = multiarea-robust\ntrials = 3\nseed = 2\n"
                 "s0 = 0.05\ne0 = 0.05\n")
    b = tmp_path / "wls.cfg"
    b.write_text("partition = ieee30.areas\nmode = multiarea-wls\ntrials = 3\nseed = 2\n"
                 "s0 = 0.05\ne0 = 0.05\n")
    assert main([
        "compare", "--config-a", str(a), "--config-b", str(b), "--out", str(tmp_path),
    ]) == 0
    assert os.path.exists(tmp_path / "compare.csv")


def test_central_mode_without_partition(tmp_path):
    assert main([
        "estimate", "--mode", "central-wls", "--seed", "4", "--out", str(tmp_path),
    ]) == 0
    assert os.path.exists(tmp_path / "estimate_central-wls.csv")


def test_trials_validation(capsys):
    assert main(["estimate", "--mode", "central-wls", "--trials", "0"]) == 1


def test_bad_uncertainty_flag(capsys):
    assert main(["estimate", "--mode", "central-wls", "--uncertainty", "1"]) == 1


def test_parallel_flag_matches_sequential(tmp_path):
    base = ["estimate", "--partition", "ieee30.areas", "--mode", "multiarea-robust",
            "--seed", "9", "--uncertainty", "0.05,0.05", "--format", "csv"]
    assert main(base + ["--out", str(tmp_path / "seq")]) == 0
    assert main(base + ["--out", str(tmp_path / "par"), "--parallel"]) == 0
    fa = (tmp_path / "seq" / "estimate_multiarea-robust.csv").read_bytes()
    fb = (tmp_path / "par" / "estimate_multiarea-robust.csv").read_bytes()
    assert fa == fb


def test_prepare_and_run_trial_api(part30):
    exp = prepare(partition="ieee30.areas", overrides={"seed": 0, "s0": 0.0, "e0": 0.0})
    assert exp.part.area_count == 3
    res = run_trial(exp, 0, robust=False)
    assert len(res.bus_ids) == 30
    assert not exp.warnings


def test_mu_flag_switches_strategy():
    exp = prepare(overrides={})
    assert exp.cfg.lambda_strategy == "approx"
    from gridstate.cli import _cfg_overrides
    import argparse

    ns = argparse.Namespace(seed=None, trials=None, tol=None, mu=2.5,
                            lambda_exact=False, uncertainty=None)
    ov = _cfg_overrides(ns)
    assert ov == {"mu": 2.5, "lambda_strategy": "approx"}
    ns2 = argparse.Namespace(seed=None, trials=None, tol=None, mu=None,
                             lambda_exact=True, uncertainty="0.1,0.2")
    ov2 = _cfg_overrides(ns2)
    assert ov2["lambda_strategy"] == "exact"
    assert ov2["s0"] == 0.1 and ov2["e0"] == 0.2
