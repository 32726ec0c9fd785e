"""Batch CLI: config merging, command dispatch, report emission, exit codes."""

import json
import subprocess
import sys

import pytest

from swbin.cli import main

SIM_CONFIG = {
    "source": {"kind": "dsbs", "p": 0.11},
    "rbc_x": {"family": "fixed_rate", "rate": 0.85},
    "rbc_y": {"family": "fixed_rate", "rate": 0.85},
    "sim": {"n": 8, "trials": 120, "seed": 3},
}


def run(capsys, args):
    code = main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def run_json(capsys, args):
    code, out, err = run(capsys, args)
    assert code == 0, err
    return json.loads(out)


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_minimal_fixed_rate_exponent_config(capsys):
    data = run_json(capsys, [
        "exponent", "source.kind=dsbs", "source.p=0.2",
        "rbc_x.family=fixed_rate", "rbc_x.rate=0.8",
        "rbc_y.family=fixed_rate", "rbc_y.rate=0.8"])
    results = data["results"]
    assert set(results) == {"E1", "E2", "E3", "min"}
    for branch in results.values():
        assert "value" in branch and "argmin" in branch
    assert results["min"]["value"] == 0.0  # sum rate below the joint entropy


def test_negative_rate_is_config_error(capsys):
    code, _, err = run(capsys, [
        "exponent", "source.kind=dsbs", "source.p=0.2",
        "rbc_x.family=fixed_rate", "rbc_x.rate=-0.5",
        "rbc_y.family=fixed_rate", "rbc_y.rate=0.5"])
    assert code == 2
    assert "rbc_x" in err


def test_unknown_key_rejected_with_location(capsys, tmp_path):
    path = write_config(tmp_path, SIM_CONFIG)
    code, _, err = run(capsys, ["simulate", "--config", path, "sim.trails=5"])
    assert code == 2
    assert "sim.trails" in err and "allowed" in err


def test_unknown_menu_key_names_the_pair(capsys):
    code, _, err = run(capsys, [
        "tradeoff", "source.kind=dsbs", "source.p=0.2",
        'menu=[[{"family": "fixed_rate", "rate": 0.5},'
        ' {"family": "fixed_rate", "rte": 0.5}]]',
        "ecl_levels=[0.0]"])
    assert code == 2
    assert "menu[0][1].rte" in err


def test_flag_overrides_file_value(capsys, tmp_path):
    path = write_config(tmp_path, SIM_CONFIG)
    data = run_json(capsys, ["simulate", "--config", path, "--trials", "60"])
    assert data["config"]["sim"]["trials"] == 60
    assert data["results"]["trials"] == 60


def test_threads_env_fallback_and_flag_precedence(capsys, tmp_path, monkeypatch):
    path = write_config(tmp_path, SIM_CONFIG)
    monkeypatch.setenv("SWBIN_THREADS", "2")
    data = run_json(capsys, ["simulate", "--config", path])
    assert data["config"]["sim"]["threads"] == 2
    data2 = run_json(capsys, ["simulate", "--config", path, "--threads", "1"])
    assert data2["config"]["sim"]["threads"] == 1
    # thread count must not change the tallies
    assert data2["results"]["decoders"] == data["results"]["decoders"]


def test_no_command_is_config_error(capsys):
    code, _, err = run(capsys, ["--format", "json"])
    assert code == 2
    assert "no command" in err


def test_unknown_flag_exits_2(capsys):
    assert main(["exponent", "--frobnicate"]) == 2
    capsys.readouterr()


def test_config_file_must_be_json(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("not json {")
    code, _, err = run(capsys, ["simulate", "--config", str(path)])
    assert code == 2
    assert "JSON" in err


def test_simulate_sign_magnitude_zero_errors(capsys, tmp_path):
    path = write_config(tmp_path, {
        "source": {"kind": "sign_magnitude"},
        "rbc_x": {"family": "star",
                  "conditional": [[1, 0], [1, 0], [0, 1], [0, 1]],
                  "bin_alphabet": [0, 1]},
        "rbc_y": {"family": "star", "conditional": [[1, 0], [0, 1]]},
        "sim": {"n": 10, "trials": 300, "seed": 2, "n_max": 16},
    })
    data = run_json(capsys, ["simulate", "--config", path])
    assert data["results"]["decoders"][0]["err_total"] == 0
    assert data["results"]["decoders"][0]["empirical_exponent"] is None


def test_demo_pathological_end_to_end(capsys):
    data = run_json(capsys, ["demo-pathological", "--trials", "200", "--seed", "1"])
    assert data["results"]["simulation"]["decoders"][0]["err_total"] == 0
    for branch in ("E1", "E2", "E3"):
        assert data["results"]["exponents"][branch]["value"] == "inf"


def test_tradeoff_csv_rows_match_levels_and_fall(capsys):
    # one pair above the length threshold (excess certain, e_err > 0) and one
    # below it (excess never happens, e_err = 0): the curve steps down once
    menu = [[{"family": "fixed_rate", "rate": 1.0}] * 2,
            [{"family": "fixed_rate", "rate": 0.4}] * 2]
    code, out, err = run(capsys, [
        "tradeoff", "--format", "csv",
        "source.kind=dsbs", "source.p=0.11",
        f"menu={json.dumps(menu)}",
        "r_tilde_x=0.5", "r_tilde_y=0.5",
        "ecl_levels=[0.0,0.1,0.5,1.0,2.0]"])
    assert code == 0, err
    lines = out.strip().splitlines()
    assert lines[0] == "level,feasible,e_err,member_index,member_ecl"
    assert len(lines) == 6
    values = [float(line.split(",")[2]) for line in lines[1:]]
    assert all(a >= b - 1e-9 for a, b in zip(values, values[1:]))
    assert values[0] > values[-1] + 1e-3


def test_zeta_primal_dual_gap(capsys):
    data = run_json(capsys, [
        "zeta", "source.kind=dsbs", "source.p=0.2",
        "q_ux=[[0.3,0.2],[0.25,0.25]]", "--budget-resolution", "24"])
    assert data["results"]["gap"] <= 2e-3


def test_validate_residuals_through_cli(capsys):
    data = run_json(capsys, [
        "validate", "rbc_x.family=star",
        "rbc_x.conditional=[[0.9,0.1],[0.2,0.8]]",
        "rbc_x.source_alphabet=[0,1]", "rbc_x.bin_alphabet=[0,1]"])
    assert data["results"]["residual"] <= 1e-9
    bad = run_json(capsys, [
        "validate", "rbc_x.family=general_table", "rbc_x.constant_cost=0.0",
        "rbc_x.source_alphabet=[0,1]", "rbc_x.bin_alphabet=[0,1]"])
    assert abs(bad["results"]["residual"] - 1.0) <= 1e-6


def test_threshold_command_reports_rate(capsys):
    data = run_json(capsys, [
        "threshold", "source.kind=dsbs", "source.p=0.2",
        "dist.table=[[0,1],[1,0]]", "dist.level=0.1",
        "regime=ecl_infinity",
        "budget.grid_resolution=6", "budget.multiplier_cap=8"])
    assert 0.0 <= data["results"]["threshold_rate"] <= 1.0
    assert data["results"]["regime"] == "ecl_infinity"


def test_bounds_csv_columns(capsys):
    code, out, err = run(capsys, [
        "bounds", "--format", "csv",
        "source.kind=dsbs", "source.p=0.2",
        "dist.table=[[0,1],[1,0]]", "dist.level=0.1",
        "r_tilde=0.6", "ecl_levels=[0.0]",
        "budget.grid_resolution=4", "budget.multiplier_cap=4"])
    assert code == 0, err
    lines = out.strip().splitlines()
    assert lines[0] == "ecl_level,e_hat,e_tilde,combined"
    assert len(lines) == 2


def test_report_roundtrips_through_echoed_config(capsys, tmp_path):
    path = write_config(tmp_path, SIM_CONFIG)
    first = run_json(capsys, ["simulate", "--config", path])
    echoed = write_config(tmp_path, first["config"], "echo.json")
    second = run_json(capsys, ["--config", echoed])  # command from the echo
    del first["created_utc"], second["created_utc"]
    assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)


def test_output_file_matches_stdout_bytes(capsys, tmp_path):
    path = write_config(tmp_path, SIM_CONFIG)
    out_path = tmp_path / "report.json"
    code, out, _ = run(capsys, ["simulate", "--config", path])
    assert code == 0
    assert main(["simulate", "--config", path, "--output", str(out_path)]) == 0
    capsys.readouterr()
    a, b = json.loads(out), json.loads(out_path.read_text())
    for payload in (a, b):
        payload.pop("created_utc")
        payload["config"].pop("output", None)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_unwritable_output_is_internal_error(capsys, tmp_path):
    path = write_config(tmp_path, SIM_CONFIG)
    code, _, err = run(capsys, [
        "simulate", "--config", path, "--output",
        str(tmp_path / "missing_dir" / "report.json")])
    assert code == 1
    assert "error" in err


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "swbin.cli", "demo-pathological",
         "--trials", "50", "--seed", "4"],
        capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["results"]["simulation"]["decoders"][0]["err_total"] == 0
