"""Config loading/validation and deterministic on-disk artifacts.

Runs write three artifacts into the output directory: ``metrics.csv`` (long
format, one metric observation per row), ``summary.json``, and the
``stats.json`` / ``params.json`` checkpoints.  All writes are atomic
(temp file + rename) and byte-deterministic for a fixed seed: floats are
serialized with ``repr`` so the shortest round-trippable decimal is used.
"""

import csv
import json
import os
import tempfile

from .errors import ConfigError

__all__ = [
    "load_config",
    "validate_config",
    "write_metrics_csv",
    "write_json",
    "read_metrics_csv",
    "thread_budget",
    "METRICS_HEADER",
]

METRICS_HEADER = ["run_id", "scenario", "step", "split", "stats_mode",
                  "metric", "value"]


def _merge_validate(defaults, overrides, path=""):
    if not isinstance(overrides, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}")
    merged = {}
    for key, default in defaults.items():
        if key in overrides:
            value = overrides[key]
            # "corruptions" maps user-chosen names to specs: free-form keys
            if isinstance(default, dict) and key != "corruptions":
                value = _merge_validate(default, value, f"{path}{key}.")
            elif isinstance(default, bool) is not isinstance(value, bool):
                raise ConfigError(f"{path}{key} must be a boolean")
            elif isinstance(default, (int, float)) and not isinstance(
                value, (int, float)
            ):
                raise ConfigError(f"{path}{key} must be a number")
            elif isinstance(default, list) and not isinstance(value, list):
                raise ConfigError(f"{path}{key} must be a list")
            merged[key] = value
        else:
            merged[key] = default
    unknown = sorted(set(overrides) - set(defaults))
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {unknown} at {path or 'top level'}; "
            f"valid keys: {sorted(defaults)}"
        )
    return merged


def validate_config(defaults, overrides):
    """Merge user overrides onto scenario defaults, rejecting unknown keys."""
    return _merge_validate(defaults, overrides or {})


def load_config(path, defaults):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(defaults, raw)


def _atomic_write(path, writer):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, rows):
    """Rows are (run_id, scenario, step, split, stats_mode, metric, value)."""

    def writer(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(METRICS_HEADER)
        for row in rows:
            out.writerow([_fmt(v) for v in row])

    _atomic_write(path, writer)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header {header}")
        return [
            (r[0], r[1], int(r[2]), r[3], r[4], r[5], float(r[6]))
            for r in reader
        ]


class _ReprFloat(float):
    def __repr__(self):
        return repr(float(self))


def _reprify(obj):
    if isinstance(obj, float):
        return _ReprFloat(obj)
    if isinstance(obj, dict):
        return {k: _reprify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_reprify(v) for v in obj]
    return obj


def write_json(path, payload):
    def writer(fh):
        json.dump(_reprify(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")

    _atomic_write(path, writer)


def thread_budget(environ=None):
    """Worker cap from BNLAB_THREADS (default: logical cores).  Runs are
    single-threaded, so this is a ceiling rather than a parallelism request."""
    env = os.environ if environ is None else environ
    raw = env.get("BNLAB_THREADS", str(os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"BNLAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("BNLAB_THREADS must be >= 1")
    return n
