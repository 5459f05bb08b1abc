import json

import numpy as np
import pytest

from mfldp.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from mfldp.harness import ConfigError, ExperimentConfig, run_experiment
from mfldp.model import dumps_model_toml
from mfldp.models import rotational_model


def _outputs(d):
    return {name: (d / name).read_bytes() for name in ("result.csv", "summary.json")}


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(task="stationary", model={"builtin": "csma", "params": {"r": 4, "b": 0.5}},
                           params={"N": 50, "sample": 100.0, "replicas": 2}, seed=7)
    path = tmp_path / "cfg.toml"
    path.write_text(cfg.dumps())
    back = ExperimentConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()


def test_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(task="nope", model={"builtin": "const2"})
    with pytest.raises(ConfigError):
        ExperimentConfig(task="simulate", model={})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"builtin": "const2"}})


@pytest.mark.parametrize(
    "task, params",
    [
        ("simulate", {"N": 200, "horizon": 5.0}),
        ("stationary", {"N": 100, "sample": 300.0, "replicas": 2}),
        ("mkv", {"mode": "integrate", "nu": [1.0, 0.0], "horizon": 2.0}),
        ("mkv", {"mode": "equilibria"}),
        ("action", {"mode": "construct", "from": [0.9, 0.1], "to": [0.2, 0.8], "T": 2.0}),
        ("qp", {"mode": "compute", "from": [0.6666666666666666, 0.3333333333333333], "to": [0.5, 0.5],
                "restarts": 1}),
    ],
)
def test_byte_identical_reruns(tmp_path, task, params):
    cfg = ExperimentConfig(task=task, model={"builtin": "const2"}, params=params, seed=3)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert _outputs(a.out_dir) == _outputs(b.out_dir)
    assert a.manifest["outputs"] == b.manifest["outputs"]
    assert a.manifest["config_sha256"] == cfg.digest()


def test_stationary_mode_task(tmp_path):
    cfg = ExperimentConfig(task="stationary", model={"builtin": "const2"}, params={"N": 100, "sample": 2000.0})
    res = run_experiment(cfg, tmp_path)
    mode = res.summary["result"]["mode"]
    assert abs(mode[0] - 67) <= 2 and abs(mode[1] - 33) <= 2
    assert (tmp_path / "result.csv").read_text().startswith("c0,c1,time,probability,entries\n")


def test_manifest_written_on_failure(tmp_path):
    cfg = ExperimentConfig(task="action", model={"builtin": "const2"},
                           params={"mode": "eval", "path": str(tmp_path / "missing.csv")})
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg, tmp_path / "out")
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "error"
    assert "FileNotFoundError" in manifest["error"]
    assert not (tmp_path / "out" / "result.csv").exists()


def test_action_eval_round_trip(tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["mkv", "integrate", "--nu", "1,0", "--horizon", "5", "--dt", "0.001", "--out", str(out)]) == 0
    path_csv = out / "result.csv"
    assert path_csv.read_text().startswith("t,mu0,mu1\n")
    capsys.readouterr()
    assert main(["action", "eval", "--path", str(path_csv), "--out", str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["result"]["cost"] <= 1e-4


def test_cli_validate(capsys):
    assert main(["validate", "--model", "csma"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["irreducible"] and report["passed"]


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "bad"\nr = 2\n[[edges]]\nfrom = 0\nto = 1\nrate = "1 +"\n')
    assert main(["simulate", "--model", str(bad), "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    reducible = tmp_path / "red.toml"
    reducible.write_text('name = "red"\nr = 2\n[[edges]]\nfrom = 0\nto = 1\nrate = "1.0"\n')
    assert main(["validate", "--model", str(reducible)]) == EXIT_VALIDATION
    assert main(["simulate", "--model", str(reducible), "--out", str(tmp_path / "y")]) == EXIT_VALIDATION
    assert main(["simulate", "--model", "nosuch", "--out", str(tmp_path / "z")]) == EXIT_VALIDATION
    rot = tmp_path / "rot.toml"
    rot.write_text(dumps_model_toml(rotational_model()))
    assert main(["qp", "fw-catalog", "--model", str(rot), "--out", str(tmp_path / "w")]) == EXIT_NUMERICAL
    capsys.readouterr()


def test_cli_matches_config_file(tmp_path, capsys):
    assert main(["simulate", "--model", "csma", "--model-param", "r=4", "--N", "80", "--horizon", "3",
                 "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    cfg = ExperimentConfig(task="simulate", model={"builtin": "csma", "params": {"r": 4}},
                           params={"N": 80, "horizon": 3.0}, seed=5)
    path = tmp_path / "cfg.toml"
    path.write_text(cfg.dumps())
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")
    capsys.readouterr()


@pytest.fixture(scope="module")
def const2_report(tmp_path_factory):
    cfg = ExperimentConfig(task="report", model={"builtin": "const2"}, seed=0)
    return run_experiment(cfg, tmp_path_factory.mktemp("report"))


def test_report_gates(const2_report):
    gates = const2_report.summary["result"]["gates"]
    for name in ("lln", "zero_at_equilibrium", "sanov", "ldp_slope"):
        assert gates[name]["pass"], (name, gates[name])
    assert gates["ldp_slope"]["rel_error"] <= 0.2
    assert gates["ldp_slope"]["exact_rel_error"] <= 0.2


def test_report_reproducible(const2_report, tmp_path):
    cfg = ExperimentConfig(task="report", model={"builtin": "const2"}, seed=0)
    again = run_experiment(cfg, tmp_path)
    assert _outputs(again.out_dir) == _outputs(const2_report.out_dir)
