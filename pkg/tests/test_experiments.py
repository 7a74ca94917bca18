import json

import pytest

from conftest import tiny_sections
from shapeprobe import config as cfgmod
from shapeprobe.config import ExperimentConfig
from shapeprobe.errors import ValidationError
from shapeprobe.experiments import run_experiment
from shapeprobe.report import read_table


def _raw(kind, out_dir, **extra):
    raw = {"kind": kind, "seeds": [0], "out_dir": str(out_dir), **tiny_sections()}
    raw.update(extra)
    return raw


@pytest.mark.parametrize("raw", [
    {"kind": "dims"},
    {"kind": "dims", "seeds": []},
    {"kind": "fit", "seeds": [0]},
    {"kind": "dims", "seeds": [0], "dims": {"stage": "f7"}},
    {"kind": "dims", "seeds": [0], "bogus": 1},
    {"kind": "remove", "seeds": [0], "targeting": {"Ns": [3]}},
    {"kind": "dims", "seeds": [0], "train": {"milestones": [5, 2]}},
])
def test_invalid_configs(raw):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict(raw)


def test_digest_ignores_output_location():
    a = ExperimentConfig.from_dict({"kind": "dims", "seeds": [0], "out_dir": "x"})
    b = ExperimentConfig.from_dict({"kind": "dims", "seeds": [0], "out_dir": "y"})
    c = ExperimentConfig.from_dict({"kind": "dims", "seeds": [1], "out_dir": "x"})
    assert a.digest == b.digest != c.digest


def test_defaults_are_filled():
    c = ExperimentConfig.from_dict({"kind": "keep", "seeds": [0]})
    assert c["targeting"]["percents"] == [25, 50, 100] and c["dims"]["temperature"] == 0.1


def test_cache_root_from_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cfgmod.CACHE_ENV, str(tmp_path))
    assert cfgmod.cache_root() == tmp_path
    monkeypatch.delenv(cfgmod.CACHE_ENV)
    assert cfgmod.cache_root().name == "shapeprobe"


def test_yaml_config_loads(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("kind: dims\nseeds: [0, 1]\ndims:\n  stage: f3\n")
    c = ExperimentConfig.load(p)
    assert c.seeds == [0, 1] and c["dims"]["stage"] == "f3"
    p.write_text("kind: [dims\n")
    with pytest.raises(ValidationError):
        ExperimentConfig.load(p)


def test_dims_run_and_cached_rerun(tmp_path):
    run = run_experiment(_raw("dims", tmp_path))
    man = json.loads((run / "manifest.json").read_text())
    assert man["status"] == "complete" and man["tables"] == {"allocation": "allocation.csv"}
    header, rows = read_table(run / "allocation.csv")
    assert header[:5] == ["seed", "stage", "shape", "texture", "residual"]
    widths = {"f1": 16, "f2": 32, "f3": 64, "f4": 128}
    assert rows and all(r[2] + r[3] + r[4] == widths[r[1]] for r in rows)
    before = {p: p.read_bytes() for p in run.rglob("*") if p.is_file()}
    again = run_experiment(_raw("dims", tmp_path))
    assert again == run
    assert {p: p.read_bytes() for p in run.rglob("*") if p.is_file()} == before


def test_series_run_emits_table_and_chart(tmp_path):
    run = run_experiment(_raw("snapshot_series", tmp_path))
    header, rows = read_table(run / "series.csv")
    assert header[:2] == ["seed", "epoch"] and [r[1] for r in rows] == [0, 1, 2]
    assert (run / "series.svg").exists()


def test_invalid_stage_creates_nothing(tmp_path):
    with pytest.raises(ValidationError):
        run_experiment(_raw("dims", tmp_path, dims={"stage": "f9"}))
    assert list(tmp_path.iterdir()) == []


def test_failed_run_is_marked(tmp_path, monkeypatch):
    from shapeprobe import experiments

    def boom(cfg, run_dir, tables):
        raise RuntimeError("kaput")

    monkeypatch.setitem(experiments.RUNNERS, "dims", boom)
    with pytest.raises(RuntimeError):
        run_experiment(_raw("dims", tmp_path))
    (run,) = tmp_path.iterdir()
    man = json.loads((run / "manifest.json").read_text())
    assert man["status"] == "failed" and "kaput" in man["error"]
    assert "kaput" in (run / "error.txt").read_text()
