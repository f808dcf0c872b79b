import csv

import pytest

from gift.cli import main

TINY = ["--set", "dataset.classes=10", "--set", "dataset.dim=8", "--set", "dataset.pool_per_class=12",
        "--set", "dataset.test_per_class=6", "--set", "dataset.ipc=3", "--set", "train.epochs=2", "--set", "teacher.epochs=2"]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    assert "cosine" in capsys.readouterr().out


def test_check_bounds_command(tmp_path, capsys):
    assert main(["check-bounds", "--k", "32", "--tau", "0.5", "--trials", "50", "--out", str(tmp_path / "b.csv")]) == 0
    assert "Jensen bound holds" in capsys.readouterr().out
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 51


def test_run_command_with_config(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("loss.id = kl\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")] + TINY) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "results.csv")))
    assert rows[0]["loss"] == "kl"


def test_sweep_command(tmp_path, capsys):
    args = ["sweep", "--axis", "loss=ce,cosine", "--axis", "seed=0,1", "--axis", "gamma=0:0.2:0.1", "--out", str(tmp_path)]
    assert main(args + TINY) == 0
    rows = list(csv.DictReader(open(tmp_path / "results.csv")))
    assert sum(r["seed"] == "aggregate" for r in rows) == 6


def test_gdumb_command(capsys):
    assert main(["gdumb", "--steps", "5"] + TINY) == 0
    out = capsys.readouterr().out
    assert "step 5: classes 10, memory 30" in out


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown.key = 3\n")
    assert main(["run", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["sweep"])
