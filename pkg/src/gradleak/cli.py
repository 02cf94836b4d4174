"""Command line entry point: ``gradleak synth | run | report``.

Exit status is 0 on success, 2 for an invalid configuration and 3 for
file I/O or format problems.
"""
from __future__ import annotations

import argparse
import os
import sys
from collections import defaultdict

import numpy as np

from . import harness
from .data import FormatError, save_dataset, synth_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _resolve_jobs(flag: int | None) -> int:
    if flag is not None:
        jobs = flag
    else:
        raw = os.environ.get("GRADLEAK_JOBS", "1")
        try:
            jobs = int(raw)
        except ValueError:
            raise harness.ConfigError(f"GRADLEAK_JOBS must be an integer, got {raw!r}") from None
    if jobs < 1:
        raise harness.ConfigError(f"jobs must be >= 1, got {jobs}")
    return jobs


def _cmd_synth(args) -> int:
    cfg = harness.load_config(args.config) if args.config else harness.ScenarioConfig()
    n = args.n if args.n is not None else cfg.n
    height = args.height if args.height is not None else cfg.height
    width = args.width if args.width is not None else cfg.width
    seed = args.seed if args.seed is not None else cfg.data_seed
    try:
        dataset = synth_dataset(n, height, width, seed)
    except ValueError as exc:
        raise harness.ConfigError(str(exc)) from exc
    save_dataset(dataset, args.out)
    print(f"wrote {n} samples ({height}x{width}) to {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    report = harness.run_scenario(cfg, _resolve_jobs(args.jobs))
    harness.emit_report(report, args.format, args.out)
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return EXIT_OK


def _summary(report: harness.LeakageReport) -> str:
    groups = defaultdict(list)
    for r in report.rows:
        if r.value is not None:
            groups[(r.scenario, r.metric, r.layer_set, r.sweep_value, r.tau)].append(r.value)
    lines = [f"{'scenario':<14}{'metric':<17}{'layers':<8}{'sweep':>10}{'tau':>7}{'median':>12}{'n':>4}"]
    def key(item):
        scen, metric, layers, sweep, tau = item[0]
        return scen, metric, layers, -np.inf if sweep is None else sweep, -np.inf if tau is None else tau

    for (scen, metric, layers, sweep, tau), vals in sorted(groups.items(), key=key):
        sw = "" if sweep is None else f"{sweep:g}"
        t = "" if tau is None else f"{tau:g}"
        lines.append(f"{scen:<14}{metric:<17}{layers:<8}{sw:>10}{t:>7}{np.median(vals):>12.5g}{len(vals):>4}")
    return "\n".join(lines)


def _cmd_report(args) -> int:
    try:
        report = harness.read_report(args.input)
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{args.input}: not a leakage report ({exc})") from exc
    if args.out:
        harness.emit_report(report.sorted(), args.format, args.out)
        print(f"wrote {len(report.rows)} rows to {args.out}")
    else:
        print(_summary(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradleak", description="Gradient leakage scenarios on mini models.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic attributed dataset (GLK1 file)")
    synth.add_argument("--config", help="scenario file supplying n, height, width and data_seed")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--n", type=int)
    synth.add_argument("--height", type=int)
    synth.add_argument("--width", type=int)
    synth.set_defaults(func=_cmd_synth)

    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    run.add_argument("--jobs", type=int, help="parallel cells (default: $GRADLEAK_JOBS or 1)")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="summarise or convert a saved report")
    rep.add_argument("input")
    rep.add_argument("--out", help="re-emit the report here instead of printing a summary")
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
