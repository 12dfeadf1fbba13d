import json
import subprocess
import sys

import pytest

from relamix import cli
from relamix import data as D

FAST = {"model": {"window": 8, "d_bottleneck": 8, "d_model": 16, "n_blocks": 1},
        "train": {"max_epochs": 2, "steps_per_epoch": 3}}


def _json(path):
    return json.loads(path.read_text())


def test_simulate_zero_ratio_reproduces_input(tmp_path):
    src = tmp_path / "in.csv"
    D.write_csv(D.synth_series("gbm_ohlcv", 500, 3), src)
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--input", str(src), "--ratio", "0", "--out", str(out)]) == 0
    assert (out / "corrupted.csv").read_bytes() == src.read_bytes()
    stats = _json(out / "stats.json")
    assert stats["fraction"] == 0.0
    man = _json(out / "manifest.json")
    assert man["command"] == "simulate" and str(src) in man["inputs"]


def test_simulate_requires_ratio(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", "--synth", "gbm_ohlcv", "--out", str(tmp_path)])
    assert e.value.code == 2
    assert "--ratio" in capsys.readouterr().err


def test_simulate_rejects_bad_ratio(tmp_path):
    assert cli.main(["simulate", "--synth", "gbm_ohlcv", "--ratio", "1.0", "--out", str(tmp_path)]) == 2


def test_simulate_large_synthetic_hits_target(tmp_path):
    out = tmp_path / "big"
    rc = cli.main(["simulate", "--synth", "sine_mixture", "--length", "1000000", "--ratio", "0.25",
                   "--mask-format", "bin", "--out", str(out)])
    assert rc == 0
    assert 0.24 <= _json(out / "stats.json")["fraction"] <= 0.26
    assert (out / "mask.bin").exists()


def test_simulate_missing_input_is_io_error(tmp_path):
    rc = cli.main(["simulate", "--input", str(tmp_path / "nope.csv"), "--ratio", "0.2", "--out", str(tmp_path / "o")])
    assert rc == 3


def test_train_is_reproducible_and_echoes_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(FAST))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["train", "--config", str(cfg), "--synth", "sine_mixture", "--length", "1500", "--out", str(out)])
        assert rc == 0
        runs.append(out)
    assert (runs[0] / "params.bin").read_bytes() == (runs[1] / "params.bin").read_bytes()
    man = _json(runs[0] / "manifest.json")["config"]
    assert man["model"]["d_out"] == 5 and man["model"]["dropout"] == 0.1
    assert man["train"]["learning_rate"] == 1e-3 and man["delay_ratio"] == 0.25
    assert man["split"] == [0.7, 0.15, 0.15]
    assert (runs[0] / "history.csv").read_text().startswith("epoch,train_loss,val_loss\n")

    # a manifest is itself a valid config
    rc = cli.main(["train", "--config", str(runs[0] / "manifest.json"), "--out", str(tmp_path / "c")])
    assert rc == 0
    assert (tmp_path / "c" / "params.bin").read_bytes() == (runs[0] / "params.bin").read_bytes()


def test_train_rejects_inconsistent_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"d_bottleneck": 128, "d_model": 64}}))
    rc = cli.main(["train", "--config", str(cfg), "--synth", "gbm_ohlcv", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "d_bottleneck" in capsys.readouterr().err


def test_train_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"optimizer": "sgd"}))
    assert cli.main(["train", "--config", str(cfg), "--synth", "gbm_ohlcv", "--out", str(tmp_path / "o")]) == 2
    assert "optimizer" in capsys.readouterr().err


def test_grid_and_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**FAST, "grid": {"delay_ratios": [0.15], "horizons": [1, 5]}}))
    out = tmp_path / "g"
    rc = cli.main(["grid", "--config", str(cfg), "--synth", "gbm_ohlcv", "--length", "1500",
                   "--models", "relamix", "--out", str(out)])
    assert rc == 0
    assert len(list((out / "cells").glob("*.json"))) == 2
    assert len(list((out / "histories").glob("*.csv"))) == 2
    capsys.readouterr()

    assert cli.main(["report", "--in", str(out), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [(r["model"], r["k"]) for r in doc] == [("relamix", 1), ("relamix", 5)]
    assert cli.main(["report", "--in", str(out / "cells"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.count("\n") == 3
    assert cli.main(["report", "--in", str(out), "--format", "table"]) == 0
    table = capsys.readouterr().out
    assert "15% k=5" in table and "\x1b[" not in table


def test_grid_cell_failure_exit_code(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"window": 20}, "train": FAST["train"],
                               "grid": {"delay_ratios": [0.2], "horizons": [1, 10]}}))
    out = tmp_path / "g"
    rc = cli.main(["grid", "--config", str(cfg), "--synth", "gbm_ohlcv", "--length", "180",
                   "--models", "persistence", "--out", str(out)])
    assert rc == 1
    fails = _json(out / "failures.json")
    assert len(fails) == 1 and fails[0]["k"] == 10
    assert len(_json(out / "reports.json")) == 1


def test_report_unreadable_input(tmp_path):
    assert cli.main(["report", "--in", str(tmp_path / "missing")]) == 3
    (tmp_path / "bad.json").write_text("[")
    assert cli.main(["report", "--in", str(tmp_path)]) == 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "relamix.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("relamix ")
