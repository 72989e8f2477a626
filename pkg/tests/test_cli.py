import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from wpl_lab.cli import ConfigError, RunConfig, build_parser, format_value, main, resolve_config
from wpl_lab.trainer import CSV_COLUMNS

PLAN = {
    "dataset": {"kind": "blobs", "noise": 0.5, "n_per_class": 60},
    "hidden_a": [6, 6, 6],
    "hidden_b": [6, 6, 6, 4, 6],
    "epochs_b": 1,
    "max_epochs_a": 10,
}
SEARCH = {"space": {"nodes": 2, "width": 6}, "epochs": 2, "archs_per_epoch": 2, "batches": 2,
          "eval_size": 40, "reward_size": 40, "fisher_samples": 8,
          "wpl": {"warmup_epochs": 1, "post_warmup_epochs": 1}}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"plan": PLAN, "search": SEARCH, "sweep_counts": [0, 4]}))
    return p


def test_unknown_command_exits_nonzero(capsys):
    assert main(["train-everything"]) == 2
    assert "unknown command" in capsys.readouterr().err


def test_entry_point_runs_as_module(tmp_path):
    r = subprocess.run([sys.executable, "-m", "wpl_lab.cli", "bogus"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_bad_config_rejected(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"plan": {"shared_layers": 9}}))
    assert main(["two-model", "--config", str(p)]) == 2
    p.write_text(json.dumps({"colour": "blue"}))
    assert main(["two-model", "--config", str(p)]) == 2
    assert main(["two-model", "--config", str(tmp_path / "missing.json")]) == 2


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert float(format_value(1 / 3)) == 1 / 3
    assert format_value(True) == "1" and format_value(np.int64(7)) == "7"


def test_flags_override_config(config):
    args = build_parser().parse_args(["nas", "--config", str(config), "--seed", "3", "--seed", "5",
                                      "--alpha", "2.5", "--lr", "0.05", "--epochs", "7", "--no-wpl"])
    cfg = resolve_config(args)
    assert cfg.seeds == [3, 5] and not cfg.with_wpl
    assert cfg.search["wpl"]["alpha0"] == 2.5 and cfg.search["wpl"]["warmup_epochs"] == 1
    assert cfg.plan["lr"] == 0.05 and cfg.search["epochs"] == 7 and cfg.plan["epochs_b"] == 7


def test_two_model_outputs_and_manifest(config, tmp_path):
    out = tmp_path / "o"
    assert main(["two-model", "--config", str(config), "--seed", "0", "--seed", "1", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.json", "summary.json"] + sorted(
        f"two_model_seed{s}_{v}.csv" for s in (0, 1) for v in ("with_wpl", "without_wpl"))
    with open(out / "two_model_seed0_with_wpl.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) > 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["wall_clock_seconds"] > 0
    echoed = RunConfig.from_dict(manifest["config"])
    assert echoed.plan == PLAN and echoed.seeds == [0, 1]
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["seeds"]) == 2 and "median_reduction_rate" in summary


def test_csv_bytes_are_deterministic(config, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["sweep", "--config", str(config), "--seed", "2", "--out", str(o)]) == 0
    for name in ("sweep_seed2_shared0.csv", "sweep_seed2_shared4.csv", "sweep_table.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_parallel_fan_out_matches_serial(config, tmp_path, monkeypatch):
    main(["two-model", "--config", str(config), "--seed", "0", "--seed", "1", "--out", str(tmp_path / "s")])
    monkeypatch.setenv("WPL_LAB_THREADS", "2")
    main(["two-model", "--config", str(config), "--seed", "0", "--seed", "1", "--out", str(tmp_path / "p")])
    for s in (0, 1):
        name = f"two_model_seed{s}_with_wpl.csv"
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_nas_command(config, tmp_path):
    out = tmp_path / "n"
    assert main(["nas", "--config", str(config), "--seed", "0", "--out", str(out)]) == 0
    best = json.loads((out / "nas_seed0_with_wpl_best.json").read_text())
    assert len(best["decisions"]) == 4 and 0 <= best["final_validation_accuracy"] <= 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean_diff_lower_with_wpl"] in (0, 1)
    with open(out / "nas_seed0_without_wpl.csv") as fh:
        assert len(list(csv.reader(fh))) == 3


def test_verify_laplace(tmp_path):
    p = tmp_path / "l.json"
    p.write_text(json.dumps({"laplace": {"n_models": 2, "n_theta": 2, "n_identity": 5}}))
    out = tmp_path / "l"
    assert main(["verify-laplace", "--config", str(p), "--seed", "0", "--out", str(out)]) == 0
    report = json.loads((out / "laplace.json").read_text())["0"]
    assert all(report["passes"].values())
    assert report["report"]["marginal_max_abs_error"] <= 1e-6


def test_run_config_round_trip():
    cfg = RunConfig("sweep", seeds=[4], plan=dict(PLAN))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        RunConfig("sweep", seeds=[]).validate()
