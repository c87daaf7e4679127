"""Command-line entry point.

Usage pattern::

    sll <experiment> [--config file.json] [--params '{"model": "gw", ...}']
                     [--seed N] [--replicates N] [--workers N] [--out path]
    sll verify <suite>|list [--seed N] [--workers N] [--out path]
    sll limits --query <name> [--params '{...}']
    sll csv records.jsonl [--out table.csv]

Exit codes: 0 on success, 1 on a usage or configuration error, 2 when a
verification suite reports a failed check.
"""

from __future__ import annotations

import argparse
import json
import sys

from .runner import (
    DEFAULT_SEED,
    EXPERIMENTS,
    ExperimentConfig,
    SUITES,
    records_to_csv,
    run,
    summarize,
    verify_suite,
)


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print("%s: error: %s" % (self.prog, message), file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with experiment parameters")
    parser.add_argument("--params", help="inline JSON object merged over --config")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--replicates", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--out", default=None, help="append the JSON record here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sll",
        description="Simulation and exact numerics for critical spread-out lattice models.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in EXPERIMENTS:
        item = sub.add_parser(name, help="run the %s experiment" % name)
        _add_common(item)
        if name == "limits":
            item.add_argument("--query", help="which exact reference value to evaluate")

    verify = sub.add_parser("verify", help="run a verification suite")
    verify.add_argument("suite", help="suite name, or 'list' to enumerate suites")
    verify.add_argument("--seed", type=int, default=DEFAULT_SEED)
    verify.add_argument("--workers", type=int, default=None)
    verify.add_argument("--out", default=None, help="append the aggregated record here")

    csv_cmd = sub.add_parser("csv", help="convert JSON-line records to CSV")
    csv_cmd.add_argument("records", help="path to a .jsonl record file")
    csv_cmd.add_argument("--out", default=None, help="CSV destination (default stdout)")
    return parser


def _load_params(args) -> dict:
    params: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as handle:
            loaded = json.load(handle)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold one JSON object")
        params.update(loaded)
    if getattr(args, "params", None):
        inline = json.loads(args.params)
        if not isinstance(inline, dict):
            raise ValueError("--params must be a JSON object")
        params.update(inline)
    if getattr(args, "query", None):
        params["query"] = args.query
    return params


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "csv":
        try:
            with open(args.records, "r", encoding="utf-8") as handle:
                lines = handle.readlines()
            if args.out:
                with open(args.out, "w", encoding="utf-8", newline="") as out:
                    count = records_to_csv(lines, out)
            else:
                count = records_to_csv(lines, sys.stdout)
        except (OSError, json.JSONDecodeError) as exc:
            print(json.dumps({"error": str(exc)}), file=sys.stderr)
            return 1
        print("%d records" % count, file=sys.stderr)
        return 0

    if args.command == "verify":
        if args.suite == "list":
            for name in sorted(SUITES):
                print("%-10s %s" % (name, " ".join(SUITES[name])))
            return 0
        if args.suite not in SUITES:
            print(
                json.dumps({"error": "unknown suite %r" % args.suite}), file=sys.stderr
            )
            return 1
        if args.workers is not None:
            import os

            os.environ["SLL_WORKERS"] = str(args.workers)
        record = verify_suite(args.suite, seed=args.seed, quiet=False)
        if args.out:
            with open(args.out, "a", encoding="utf-8") as handle:
                handle.write(record.to_json() + "\n")
        print("suite %s: %s" % (args.suite, "PASS" if record.results["passed"] else "FAIL"))
        return 0 if record.results["passed"] else 2

    try:
        config = ExperimentConfig(
            experiment=args.command,
            params=_load_params(args),
            replicates=args.replicates,
            seed=args.seed,
            workers=args.workers,
            output_path=args.out,
        )
        record = run(config, quiet=True)
    except (ValueError, KeyError, OSError, json.JSONDecodeError, RuntimeError) as exc:
        print(
            json.dumps({"error": str(exc), "experiment": args.command}), file=sys.stderr
        )
        return 1
    print(summarize(record))
    if not args.out:
        print(record.to_json())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
