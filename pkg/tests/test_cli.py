import csv
import json

import numpy as np
import pytest

from pchisd import cli
from pchisd.landscape import LANDSCAPE_CONFIG


def test_unknown_preset_is_usage_error(tmp_path, capsys):
    assert cli.main(["solve", "--preset", "nope", "--out", str(tmp_path / "r")]) == cli.USAGE
    assert "unknown preset" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("argv", [
    ["solve", "--n", "1"],
    ["solve", "--lambda", "-1"],
    ["sweep", "--range", "1:1:0.1"],
    ["sweep", "--range", "abc"],
    ["solve", "--max-norm", "0"],
])
def test_bad_values_rejected(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path / "r")]) == cli.USAGE


def test_flags_override_config_file(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"schema_version": cli.CONFIG_SCHEMA, "n": 16, "lam": 0.5, "eps": 1e-3}))
    cfg = cli.resolve_config(["solve", "--config", str(cfg_file), "--lambda", "0.1"])
    assert (cfg.n, cfg.lam, cfg.eps) == (16, 0.1, 1e-3)


def test_unknown_config_key(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"nn": 3}))
    with pytest.raises(cli.UsageError):
        cli.resolve_config(["solve", "--config", str(cfg_file)])


def test_hisd_defaults_depend_on_command():
    land = cli.resolve_config(["landscape"]).hisd(2)
    assert land.metric == "h1" and land.max_iter == LANDSCAPE_CONFIG.max_iter and land.k == 2
    solve = cli.resolve_config(["solve", "--max-iter", "7"]).hisd()
    assert solve.metric == "euclidean" and solve.max_iter == 7


def test_solve_at_zero_and_no_overwrite(tmp_path, capsys):
    out = tmp_path / "run"
    argv = ["solve", "--n", "32", "--k", "4", "--out", str(out)]
    assert cli.main(argv) == cli.OK
    saddle = json.loads((out / "saddle.json").read_text())
    assert saddle["index"] == 4
    assert np.max(np.abs(saddle["u"])) < 1e-12
    snap = json.loads((out / "config.json").read_text())
    assert snap["schema_version"] == cli.CONFIG_SCHEMA and snap["k"] == 4
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0].startswith("# schema") and lines[1].startswith("iteration,")
    node_csv = next((out / "nodes").glob("*.csv"))
    rows = list(csv.reader(line for line in node_csv.read_text().splitlines() if not line.startswith("#")))
    assert len(rows) == 32  # header + 31 interior nodes

    assert cli.main(argv) == cli.USAGE
    assert "--force" in capsys.readouterr().err
    assert cli.main(argv + ["--force"]) == cli.OK


def test_solve_constrained_case3(tmp_path):
    out = tmp_path / "c3"
    argv = ["solve", "--preset", "case3", "--n", "8", "--lambda", "0.002", "--init", "0.3", "--out", str(out)]
    assert cli.main(argv) == cli.OK
    u = np.asarray(json.loads((out / "saddle.json").read_text())["u"])
    assert abs(u.mean()) < 1e-12


def test_solve_nonconvergence_exit(tmp_path):
    out = tmp_path / "nc"
    assert cli.main(["solve", "--n", "16", "--init", "2", "--max-iter", "2", "--out", str(out)]) == cli.FAILED
    assert json.loads((out / "report.json").read_text())["status"] == "nonconverged"


def test_sweep_outputs(tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--n", "8", "--lambda", "1.0", "--range=-1:1:0.5", "--out", str(out)]) == cli.OK
    lines = (out / "sweep.csv").read_text().splitlines()
    data = [line for line in lines if not line.startswith("#")]
    assert len(data) == 1 + 5
    assert "measure_global" in json.loads((out / "summary.json").read_text())


def test_verify_passes_and_detects_injected_fault(tmp_path):
    good = tmp_path / "good"
    assert cli.main(["verify", "--n", "64", "--out", str(good)]) == cli.OK
    assert json.loads((good / "report.json").read_text())["passed"]
    bad = tmp_path / "bad"
    assert cli.main(["verify", "--n", "16", "--inject-fault", "gradient-sign", "--out", str(bad)]) == cli.FAILED
    report = json.loads((bad / "report.json").read_text())
    grad = [c for c in report["checks"] if c["name"].startswith("gradient")]
    assert grad and not any(c["passed"] for c in grad)
