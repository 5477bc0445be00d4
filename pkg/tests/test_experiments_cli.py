import csv
import json

import pytest
import yaml

from jumpbsde import cli
from jumpbsde.config import parse_config
from jumpbsde.experiments import (
    CHECK_COLUMNS,
    NORM_COLUMNS,
    PICARD_COLUMNS,
    ReportBundle,
    bundle_json,
    run_experiment,
    write_outputs,
)


def _cfg(**kw):
    raw = {"problem": "zero", "grid": {"n_steps": 8}, "ensemble": {"n_paths": 200, "seed": 5}, "checks": ["residual"]}
    raw.update(kw)
    return parse_config(raw)


def test_zero_residual():
    bundle = run_experiment(_cfg())
    assert bundle.passed
    assert bundle.residuals["residual"]["max_l2"] == 0.0


def test_brownian_residual_and_norms():
    cfg = _cfg(problem="brownian_terminal", ensemble={"n_paths": 2000, "seed": 5}, checks=["oracle", "residual", "norms"])
    bundle = run_experiment(cfg)
    names = {r["name"] for r in bundle.checks}
    assert "oracle_Z" in names
    assert {row["kind"] for row in bundle.norms} >= {"S_p", "H_p", "E_p"}


def test_deterministic_body():
    cfg = _cfg(problem="lipschitz_z", scheme={"ridge": 1e-8}, checks=["residual", "norms", "picard"])
    a = bundle_json(run_experiment(cfg), include_timing=False)
    b = bundle_json(run_experiment(cfg), include_timing=False)
    assert a == b


def test_check_order_and_ids():
    cfg = _cfg(checks=[{"name": "residual", "id": "r2"}, {"name": "residual", "id": "r1"}])
    bundle = run_experiment(cfg)
    assert [r["check"] for r in bundle.checks] == ["r1", "r2"]


def test_empty_bundle_headers(tmp_path):
    manifest = write_outputs(ReportBundle(), tmp_path, ("csv",))
    for name, cols in (("norms.csv", NORM_COLUMNS), ("checks.csv", CHECK_COLUMNS), ("picard.csv", PICARD_COLUMNS)):
        lines = (tmp_path / name).read_text().splitlines()
        assert lines == [",".join(cols)]
        assert name in manifest["files"]


def test_three_checks_three_rows(tmp_path):
    cfg = _cfg(checks=[{"name": "residual", "id": f"r{k}"} for k in range(3)])
    write_outputs(run_experiment(cfg), tmp_path, ("csv",))
    with open(tmp_path / "checks.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_manifest_hashes_stable(tmp_path):
    cfg = _cfg()
    m1 = write_outputs(run_experiment(cfg), tmp_path / "a", ("json", "csv"))
    m2 = write_outputs(run_experiment(cfg), tmp_path / "b", ("json", "csv"))
    assert set(m1["files"]) == {"report.json", "timing.json", "norms.csv", "checks.csv", "picard.csv"}
    for name, entry in m1["files"].items():
        assert entry["sha256"] == m2["files"][name]["sha256"]


# CLI


def _write(tmp_path, raw):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_cli_run_pass(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(cli.ENV_OUT, raising=False)
    path = _write(tmp_path, {"problem": "zero", "grid": {"n_steps": 4}, "ensemble": {"n_paths": 50, "seed": 1}, "checks": ["residual"]})
    code = cli.main(["run", str(path), "--out", str(tmp_path / "out")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] and summary["failures"] == []
    assert (tmp_path / "out" / "report.json").exists()


def test_cli_failure_exit_one(tmp_path, capsys):
    raw = {
        "problem": {"key": "linear_y", "params": {"a": 0.5, "c": 1.0}},
        "grid": {"n_steps": 2},
        "ensemble": {"n_paths": 50, "seed": 1},
        "checks": [{"name": "oracle", "limits": {"Y0_rel": 1e-9}}],
    }
    code = cli.main(["run", str(_write(tmp_path, raw)), "--out", str(tmp_path / "o")])
    assert code == 1
    summary = json.loads(capsys.readouterr().out)
    assert not summary["passed"] and summary["failures"][0]["name"] == "oracle_Y0_rel"


def test_cli_config_error_exit_two(tmp_path, capsys):
    code = cli.main(["run", str(_write(tmp_path, {"problem": "zero"}))])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and "seed" in err["message"]


def test_cli_env_out_dir(tmp_path, monkeypatch, capsys):
    path = _write(tmp_path, {"problem": "zero", "grid": {"n_steps": 4}, "ensemble": {"n_paths": 50, "seed": 1}, "checks": ["residual"]})
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert cli.main(["run", str(path)]) == 0
    assert (tmp_path / "env" / "manifest.json").exists()
    assert cli.main(["run", str(path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").exists()


def test_cli_overrides(tmp_path, capsys):
    path = _write(tmp_path, {"problem": "zero", "ensemble": {"n_paths": 50, "seed": 1}, "checks": ["residual"]})
    assert cli.main(["run", str(path), "--steps", "3", "--paths", "20", "--seed", "9", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    cfg = report["metadata"]["config"]
    assert cfg["grid"]["n_steps"] == 3 and cfg["ensemble"] == {"n_paths": 20, "seed": 9}


def test_cli_cache(tmp_path, capsys):
    path = tmp_path / "e.jbsd"
    assert cli.main(["cache", "make", str(path), "--problem", "jump_terminal", "--paths", "30", "--steps", "5", "--seed", "4"]) == 0
    made = json.loads(capsys.readouterr().out)
    assert cli.main(["cache", "verify", str(path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["sha256"] == made["sha256"]
    assert (info["n_paths"], info["n_steps"], info["seed"]) == (30, 5, 4)
    path.write_bytes(path.read_bytes()[:-1])
    assert cli.main(["cache", "verify", str(path)]) == 2
    assert "expected" in json.loads(capsys.readouterr().err)["message"]


def test_cache_make_requires_seed(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["cache", "make", str(tmp_path / "e.jbsd")])
