import csv
import json

import numpy as np
import pytest

from cardioguard import bank as bk
from cardioguard.cli import RunConfig, run
from cardioguard.errors import ConfigError
from cardioguard.grid import LabelMap, read_png, write_png

SMALL = ["--canvas", "32", "--widths", "8,16,32,32", "--batch-size", "8"]


def test_version(capsys):
    assert run(["--version"]) == 0
    out = capsys.readouterr().out
    assert "model format 1" in out and "bank format 1" in out


def test_usage_errors(tmp_path, capsys):
    assert run([]) == 2
    assert run(["validate", "--in", str(tmp_path)]) == 2  # no PNGs
    assert "error:" in capsys.readouterr().err


def test_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\nview = la\nseed = 7\nthreads = 2\n")
    cfg = RunConfig.from_file(p)
    assert (cfg.view, cfg.seed, cfg.threads) == ("la", 7, 2)
    p.write_text("view = la\ncolour = blue\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)
    p.write_text("seed = many\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)
    p.write_text("view = xy\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)
    p.write_text("bogus = 1\n")
    assert run(["validate", "--config", str(p), "--in", str(tmp_path)]) == 2


def _files(d):
    return {f.relative_to(d).as_posix(): f.read_bytes() for f in sorted(d.rglob("*")) if f.is_file()}


def test_gen_data_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run(["gen-data", "-q", "--view", "la", "--count", "6", "--seed", "3", "--size", "32",
                    "--out", str(tmp_path / name)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    assert {"targets.csv", "thresholds.json", "map_00000.png"} <= set(a)
    with open(tmp_path / "a" / "targets.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and all(0 <= float(r["t"]) <= 1 for r in rows)


def test_validate_strict(tmp_path):
    d = tmp_path / "maps"
    assert run(["gen-data", "-q", "--view", "sa", "--count", "5", "--seed", "4", "--out", str(d)]) == 0
    th = str(d / "thresholds.json")
    assert run(["validate", "-q", "--thresholds", th, "--in", str(d), "--strict"]) == 0
    m = read_png(d / "map_00002.png")
    px = m.pixels.copy()
    px[1:4, 1:4] = 1  # second RV
    write_png(LabelMap(px, m.view), d / "map_00002.png")
    rep = tmp_path / "rep.jsonl"
    assert run(["validate", "-q", "--thresholds", th, "--in", str(d), "--strict", "--report", str(rep)]) == 1
    lines = [json.loads(x) for x in rep.read_text().splitlines()]
    bad = [x for x in lines if not x["valid"]]
    assert [x["file"] for x in bad] == ["map_00002.png"] and bad[0]["violated"] == ["SA07"]
    assert all(x["violated"] == [] for x in lines if x["valid"])
    assert run(["validate", "-q", "--thresholds", th, "--in", str(d)]) == 0  # without --strict


def test_end_to_end_recipe(tmp_path):
    data, defects = tmp_path / "data", tmp_path / "bad"
    model, bank, out = tmp_path / "m.json", tmp_path / "b.aclb", tmp_path / "out"
    spec = tmp_path / "defects.json"
    spec.write_text(json.dumps({"count": 12, "seed": 5}))
    assert run(["gen-data", "-q", "--view", "sa", "--count", "48", "--seed", "41", "--size", "32",
                "--out", str(data)]) == 0
    th = str(data / "thresholds.json")
    assert run(["gen-data", "-q", "--view", "sa", "--size", "32", "--defects", str(spec),
                "--thresholds", th, "--out", str(defects)]) == 0
    assert run(["train", "-q", "--view", "sa", "--data", str(data), "--epochs", "60", *SMALL,
                "--out", str(model)]) == 0
    assert run(["augment-bank", "-q", "--thresholds", th, "--model", str(model), "--data", str(data),
                "--count", "300", "--out", str(bank)]) == 0
    assert bk.load(bank).count == 300
    assert run(["audit-bank", "-q", "--thresholds", th, "--model", str(model), "--bank", str(bank)]) == 0
    report = tmp_path / "report.json"
    assert run(["postprocess", "-q", "--thresholds", th, "--model", str(model), "--bank", str(bank),
                "--mode", "dicho", "--in", str(defects), "--out", str(out), "--report", str(report),
                "--overlay", str(tmp_path / "ov")]) == 0
    rep = json.loads(report.read_text())
    assert rep["summary"]["maps"] == 12 and rep["summary"]["invalid_before"] == 12
    assert rep["summary"]["invalid_after"] == 0
    assert all("seconds" not in e for e in rep["files"])
    assert len(list((tmp_path / "ov").glob("*.png"))) == 12
    assert run(["validate", "-q", "--thresholds", th, "--in", str(out), "--strict"]) == 0
    # same inputs, same bytes
    report2 = tmp_path / "report2.json"
    assert run(["postprocess", "-q", "--thresholds", th, "--model", str(model), "--bank", str(bank),
                "--in", str(defects), "--out", str(tmp_path / "out2"), "--report", str(report2)]) == 0
    assert report.read_bytes() == report2.read_bytes()
    assert _files(out) == _files(tmp_path / "out2")
    csv_path = tmp_path / "eval.csv"
    assert run(["eval", "-q", "--pred", str(out), "--gt", str(defects / "gt"), "--out", str(csv_path)]) == 0
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    means = [r for r in rows if r["file"] == "MEAN"]
    assert len(means) == 3 and all(0 <= float(r["dice"]) <= 1 for r in means)


def test_training_is_byte_reproducible(tmp_path):
    data = tmp_path / "d"
    assert run(["gen-data", "-q", "--view", "la", "--count", "8", "--size", "32", "--out", str(data)]) == 0
    for name in ("a.json", "b.json"):
        assert run(["train", "-q", "--view", "la", "--data", str(data), "--epochs", "2", *SMALL,
                    "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_defect_kinds_filter(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"count": 4, "seed": 1, "kinds": ["HolePunch"]}))
    assert run(["gen-data", "-q", "--view", "la", "--defects", str(spec), "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "defects.csv") as fh:
        assert {r["kind"] for r in csv.DictReader(fh)} == {"HolePunch"}
    spec.write_text(json.dumps({"count": 4, "wrong": 1}))
    assert run(["gen-data", "-q", "--view", "la", "--defects", str(spec), "--out", str(tmp_path / "p")]) == 2
