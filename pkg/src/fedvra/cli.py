"""Command-line entry point.

``fedvra run --config FILE [--seed N] [--rounds R] [--output PATH] [--set key=value ...]``
    runs one experiment, writes the metrics CSV and prints a summary line.
``fedvra verify SUITE [--report PATH]``
    runs an oracle suite and prints a JSON report.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 divergence (the CSV then holds every completed round), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, parse_config
from .fedcore import DivergenceError
from .numerics import NonFiniteError
from .runner import csv_columns, prepare, summary_line, write_rows
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "output"):
        if getattr(args, key) is not None:
            out[key] = getattr(args, key)
    if args.rounds is not None:
        out["R"] = args.rounds
    return out


def cmd_run(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        cfg = parse_config(text, _overrides(args))
        prepared = prepare(cfg)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    columns = csv_columns(cfg)
    rows = []
    try:
        with open(cfg.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(columns) + "\n")
            write = write_rows(fh, columns)

            def on_row(row):
                rows.append(row)
                write(row)

            try:
                prepared.execute(on_row)
            except (DivergenceError, NonFiniteError) as exc:
                print(summary_line(cfg, rows, status="diverged"))
                print(f"error: run diverged: {exc}", file=sys.stderr)
                return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(summary_line(cfg, rows))
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_suite(args.suite)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        try:
            Path(args.report).write_text(text + "\n", encoding="utf-8")
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK if report["passed"] else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedvra", description="Federated primal-dual experiments and checks.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="flat key = value config file")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--rounds", type=int, help="override the number of rounds R")
    run.add_argument("--output", help="override the CSV output path")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    run.set_defaults(func=cmd_run)
    ver = sub.add_parser("verify", help="run an oracle suite")
    ver.add_argument("suite", choices=SUITES)
    ver.add_argument("--report", help="also write the JSON report here")
    ver.set_defaults(func=cmd_verify)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
