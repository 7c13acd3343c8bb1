"""Config validation, metrics/JSON artifacts, thread budget parsing."""

import json
import os

import pytest

from bnlab import io
from bnlab.errors import ConfigError

DEFAULTS = {
    "steps": 100,
    "lr": 0.05,
    "hidden": [64, 64],
    "bessel": False,
    "corruptions": {"none": {"scale": 1.0}},
    "sgd": {"momentum": 0.9, "batch_size": 32},
}


def test_validate_config_merges_defaults():
    cfg = io.validate_config(DEFAULTS, {"steps": 5, "sgd": {"momentum": 0.5}})
    assert cfg["steps"] == 5
    assert cfg["lr"] == 0.05
    assert cfg["sgd"] == {"momentum": 0.5, "batch_size": 32}


def test_validate_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        io.validate_config(DEFAULTS, {"stepz": 5})
    with pytest.raises(ConfigError, match="sgd"):
        io.validate_config(DEFAULTS, {"sgd": {"beta": 0.1}})


def test_validate_config_type_checks():
    with pytest.raises(ConfigError, match="must be a number"):
        io.validate_config(DEFAULTS, {"steps": "many"})
    with pytest.raises(ConfigError, match="must be a boolean"):
        io.validate_config(DEFAULTS, {"bessel": 1})
    with pytest.raises(ConfigError, match="must be a list"):
        io.validate_config(DEFAULTS, {"hidden": 64})
    with pytest.raises(ConfigError, match="mapping"):
        io.validate_config(DEFAULTS, {"sgd": 3})


def test_validate_config_corruptions_are_free_form_maps():
    cfg = io.validate_config(
        DEFAULTS, {"corruptions": {"fog": {"scale": 0.2, "shift": 1.0}}})
    assert cfg["corruptions"] == {"fog": {"scale": 0.2, "shift": 1.0}}


def test_config_round_trip_fixed_point(tmp_path):
    cfg = io.validate_config(DEFAULTS, {"steps": 7})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    again = io.load_config(str(p), DEFAULTS)
    assert again == cfg
    p.write_text(json.dumps(again))
    assert io.load_config(str(p), DEFAULTS) == again


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        io.load_config(str(tmp_path / "missing.json"), DEFAULTS)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        io.load_config(str(bad), DEFAULTS)


def test_metrics_csv_roundtrip(tmp_path):
    rows = [
        ("run-a", "demo", 10, "val", "ema", "error", 0.125),
        ("run-a", "demo", 20, "val", "ema", "error", 0.1 + 0.2),
    ]
    p = tmp_path / "metrics.csv"
    io.write_metrics_csv(str(p), rows)
    header = p.read_text().splitlines()[0]
    assert header == "run_id,scenario,step,split,stats_mode,metric,value"
    back = io.read_metrics_csv(str(p))
    assert back == rows  # repr() float serialization round-trips exactly


def test_metrics_csv_write_is_byte_deterministic(tmp_path):
    rows = [("r", "s", 1, "val", "m", "error", 1 / 3)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    io.write_metrics_csv(str(a), rows)
    io.write_metrics_csv(str(b), rows)
    assert a.read_bytes() == b.read_bytes()


def test_read_metrics_rejects_wrong_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("run,scenario\nx,y\n")
    with pytest.raises(ConfigError):
        io.read_metrics_csv(str(p))


def test_write_json_full_precision_and_sorted(tmp_path):
    p = tmp_path / "out.json"
    io.write_json(str(p), {"b": 0.1 + 0.2, "a": [1 / 3]})
    text = p.read_text()
    assert "0.30000000000000004" in text
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [1 / 3], "b": 0.1 + 0.2}


def test_atomic_write_leaves_no_temp_files(tmp_path):
    p = tmp_path / "metrics.csv"
    io.write_metrics_csv(str(p), [])
    leftovers = [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]
    assert leftovers == []


def test_thread_budget():
    assert io.thread_budget({"BNLAB_THREADS": "4"}) == 4
    assert io.thread_budget({}) >= 1  # defaults to logical cores
    with pytest.raises(ConfigError):
        io.thread_budget({"BNLAB_THREADS": "zero"})
    with pytest.raises(ConfigError):
        io.thread_budget({"BNLAB_THREADS": "0"})
