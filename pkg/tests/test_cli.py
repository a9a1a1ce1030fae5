import json
import subprocess
import sys

import pytest
import yaml

from advpt.cli import main
from advpt.harness import load_report

SMALL = {
    "data": {"n_train": 64, "n_test": 32},
    "bank_attack": {"iterations": 2},
    "eval_attack": {"iterations": 2},
    "tune": {"epochs": 2, "context_length": 4},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def test_bank_tune_eval_interpret_report(tmp_path, config, capsys):
    out = tmp_path / "out"
    assert main(["bank", "build", "--config", str(config), "--out", str(out)]) == 0
    assert (out / "bank.bin").exists()
    capsys.readouterr()
    assert main(["bank", "inspect", str(out / "bank.bin")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert (info["N"], info["K"]) == (64, 8)

    assert main(["tune", "--config", str(config), "--out", str(out), "--bank", str(out / "bank.bin")]) == 0
    assert len(json.loads((out / "loss_trace.json").read_text())) == 2

    capsys.readouterr()
    assert main(["eval", "--config", str(config), "--out", str(out), "--context", str(out / "context.bin"),
                 "--defense", "identity", "--defense", "rescale"]) == 0
    table = capsys.readouterr().out
    assert "rescale" in table and "advpt" in table
    report = load_report(out / "report.json")
    assert {r["defense"] for r in report.rows} == {"none", "rescale"}

    capsys.readouterr()
    assert main(["interpret", str(out / "context.bin"), "--top", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and lines[0].startswith("v1: ")

    capsys.readouterr()
    assert main(["report", str(out / "report.json"), "--format", "table"]) == 0
    assert capsys.readouterr().out == (out / "report.txt").read_text()
    assert main(["report", str(out / "report.json"), "--format", "json", "--out", str(tmp_path / "copy.json")]) == 0
    assert load_report(tmp_path / "copy.json") == report


def test_sweeps_and_shift(tmp_path, config, capsys):
    out = tmp_path / "out"
    assert main(["sweep", "m", "--config", str(config), "--out", str(out), "--values", "1,2"]) == 0
    assert [r["M"] for r in load_report(out / "m_sweep.json").rows] == [1, 2]
    assert main(["sweep", "tradeoff", "--config", str(config), "--out", str(out)]) == 0
    kinds = {r["prompt_kind"] for r in load_report(out / "tradeoff.json").rows}
    assert kinds == {"fixed", "advpt", "clean_tune"}
    assert main(["shift", "--config", str(config), "--out", str(out), "--styles", "standard,sketch"]) == 0
    assert {r["dataset"] for r in load_report(out / "shift.json").rows} == {"synthetic", "synthetic-sketch"}


def test_output_dir_from_environment(tmp_path, config, monkeypatch):
    monkeypatch.setenv("ADVPT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["bank", "build", "--config", str(config)]) == 0
    assert (tmp_path / "env" / "bank.bin").exists()


def test_exit_codes(tmp_path, config, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("tune: {epochs: -3}\n")
    assert main(["tune", "--config", str(bad)]) == 2
    assert main(["bank", "inspect", str(tmp_path / "missing.bin")]) == 3
    garbage = tmp_path / "garbage.bin"
    garbage.write_bytes(b"ADVBANK\x00" + b"\x00" * 64)
    assert main(["bank", "inspect", str(garbage)]) == 5
    assert main(["report", str(config)]) == 3
    assert "error:" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "advpt.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("bank", "tune", "eval", "sweep", "shift", "interpret", "report"):
        assert cmd in res.stdout
