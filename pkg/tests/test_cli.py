import json

import pytest

from conftest import tiny_sections
from shapeprobe import cli


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(tiny_sections()))
    return p


def test_generate_stylize_train_extract(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["generate", "--out", str(data), "--num-images", "12", "--seed", "1"]) == 0
    assert cli.main(["stylize", "--manifest", str(data / "manifest.json"), "--styles", "2"]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(data / "manifest.json"), "--epochs", "1",
                     "--snapshot-every", "1", "--run-dir", str(run)]) == 0
    assert (run / "epoch_1" / "params.bin").exists()
    out = tmp_path / "feats.bin"
    assert cli.main(["extract", "--run", str(run), "--manifest", str(data / "manifest.json"),
                     "--stage", "f3", "--out", str(out)]) == 0
    assert out.exists()


def test_experiment_verb_and_report(tmp_path, cfg_file, capsys):
    assert cli.main(["dims", "--config", str(cfg_file), "--out", str(tmp_path / "runs")]) == 0
    run = capsys.readouterr().out.strip().splitlines()[-1]
    md = tmp_path / "alloc.md"
    assert cli.main(["report", "--run", run, "--table", "allocation", "--format", "markdown", "--out", str(md)]) == 0
    assert md.read_text().startswith("| seed | stage |")
    assert cli.main(["report", "--run", run, "--table", "nope"]) == 2
    assert "allocation" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["dims", "--seeds", "a,b"],
    ["dims", "--stage", "f9"],
    ["dims", "--encoder", "tiny_bagnet"],
    ["generate", "--out", "x", "--num-images", "0"],
    ["report", "--run", "/nonexistent/run", "--table", "x"],
    ["frobnicate"],
])
def test_validation_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2
    assert not (tmp_path / "runs").exists()


def test_runtime_failure_exits_1(tmp_path, cfg_file, monkeypatch):
    from shapeprobe import experiments

    def boom(cfg, run_dir, tables):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(experiments.RUNNERS, "dims", boom)
    assert cli.main(["dims", "--config", str(cfg_file), "--out", str(tmp_path / "runs")]) == 1
