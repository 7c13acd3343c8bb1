"""Command-line entry point: scenario runs, offline statistics aggregation,
and the finite-difference gradient check."""

import argparse
import json
import sys
import traceback

from . import io
from .errors import BnLabError, ConfigError, MalformedCsv, UnknownScenario
from .gradcheck import TOLERANCE, run_full_suite
from .scenarios import SCENARIOS
from .stats import (
    BatchMomentLog,
    EmaState,
    aggregate_moment_matching,
    aggregate_naive,
    ema_update,
)

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bnlab",
        description="Normalization-statistics laboratory: scenario runs, "
        "offline aggregation, gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its artifacts")
    run.add_argument("scenario")
    run.add_argument("--config", help="JSON config overriding scenario defaults")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", default="out", help="output directory")

    est = sub.add_parser("estimate",
                         help="aggregate a per-batch moment log from CSV")
    est.add_argument("--input", required=True, help="moments CSV path")
    est.add_argument("--method", required=True,
                     choices=["ema", "precise", "naive"])
    est.add_argument("--momentum", type=float, default=0.9,
                     help="EMA momentum lambda (ema method only)")
    est.add_argument("--bessel", action="store_true",
                     help="apply the N/(N-1) correction (precise method)")

    grad = sub.add_parser("check-grad",
                          help="finite-difference check of every backward")
    grad.add_argument("--seed", type=int, default=0)
    return parser


def _load_scenario_config(name, path):
    if name not in SCENARIOS:
        raise UnknownScenario(
            f"unknown scenario {name!r}; valid scenarios: "
            f"{', '.join(sorted(SCENARIOS))}"
        )
    _, defaults = SCENARIOS[name]
    if path is None:
        return io.validate_config(defaults, {})
    return io.load_config(path, defaults)


def cmd_run(args):
    try:
        cfg = _load_scenario_config(args.scenario, args.config)
    except (ConfigError, UnknownScenario) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn, _ = SCENARIOS[args.scenario]
    try:
        result = fn(cfg, args.seed)
        io.write_metrics_csv(f"{args.out}/metrics.csv", result.rows)
        io.write_json(f"{args.out}/summary.json", {
            "scenario": result.scenario,
            "seed": args.seed,
            "config": cfg,
            "summary": result.summary,
        })
        io.write_json(f"{args.out}/stats.json", result.stats_checkpoint)
        io.write_json(f"{args.out}/params.json", result.params_checkpoint)
    except (BnLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        traceback.print_exc(limit=2, file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {args.out}/metrics.csv ({len(result.rows)} rows)")
    return EXIT_OK


def cmd_estimate(args):
    try:
        with open(args.input) as fh:
            log = BatchMomentLog.from_csv(fh.read())
    except OSError as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MalformedCsv as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.method == "ema":
            state = EmaState.initial(log.entries[0].channels, args.momentum)
            for entry in log.entries:
                state = ema_update(state, entry)
            stats = state.as_channel_stats()
            note = {"momentum": args.momentum}
        elif args.method == "precise":
            stats = aggregate_moment_matching(log, bessel=args.bessel)
            note = {"bessel": args.bessel}
        else:
            stats = aggregate_naive(log)
            note = {}
    except BnLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    payload = {"method": args.method, **note,
               "mean": list(stats.mean), "var": list(stats.var)}
    json.dump(payload, sys.stdout, indent=2)
    print()
    return EXIT_OK


def cmd_check_grad(args):
    report = run_full_suite(seed=args.seed)
    ok = True
    for name, err in report.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        ok = ok and err < TOLERANCE
        print(f"{name:16s} max rel err {err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "estimate":
        return cmd_estimate(args)
    return cmd_check_grad(args)


if __name__ == "__main__":
    sys.exit(main())
