"""Command line front end: ``exanet run|sweep|compare|trace``.

Exit codes: 0 ok, 1 bad command line or unreadable scenario, 2 scenario
invariant violated (or the simulation detected an internal invariant failure).
"""
from __future__ import annotations

import argparse
import itertools
import os
import sys
from dataclasses import replace

from ..fabric import DeadlockDetected
from . import bench, compare as cmp
from .report import from_csv, summary, to_csv, to_json
from .scenario import ConfigError, ScenarioInvalid, load, parse_size


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exanet", description="Simulated ExaNet benchmarks and reports.")
    sub = p.add_subparsers(dest="cmd", metavar="{run,sweep,compare,trace}")

    def common(sp, scenario_required=True):
        sp.add_argument("scenario_file", nargs="?", help="scenario file (same as --scenario)")
        sp.add_argument("--scenario", help="scenario file")
        sp.add_argument("--out", default="results", help="results directory (default: results)")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--trace", action="store_true", help="also write cell/transfer traces")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.set_defaults(scenario_required=scenario_required)

    common(sub.add_parser("run", help="execute one scenario"))
    sw = sub.add_parser("sweep", help="cartesian sweep over N and size")
    common(sw)
    sw.add_argument("--n-ranks", help="comma separated rank counts")
    sw.add_argument("--sizes", help="comma separated sizes (K/M suffixes allowed)")
    cp = sub.add_parser("compare", help="join results with the reference table")
    common(cp, scenario_required=False)
    cp.add_argument("--results", help="results CSV from a previous run")
    common(sub.add_parser("trace", help="run with tracing and write the trace"))
    return p


def _scenario(args):
    path = args.scenario or args.scenario_file
    if path is None:
        raise UsageError(f"exanet {args.cmd}: a scenario file is required")
    return load(path, args.seed)


def _write(args, name: str, rows, metadata=None, flag=None) -> str:
    os.makedirs(args.out, exist_ok=True)
    if args.format == "json":
        path = os.path.join(args.out, f"{name}.json")
        text = to_json(rows, metadata)
    else:
        path = os.path.join(args.out, f"{name}.csv")
        text = to_csv(rows)
    with open(path, "w") as fh:
        fh.write(text)
    with open(os.path.join(args.out, f"{name}.txt"), "w") as fh:
        fh.write(summary(rows, flag))
    return path


def _dump_traces(args, name: str, sink) -> str:
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{name}.trace")
    with open(path, "w") as fh:
        for label, cluster in sink:
            fh.write(f"# {label}\n")
            for line in cluster.trace or ():
                fh.write(line + "\n")
    return path


def cmd_run(args) -> int:
    scn = _scenario(args)
    sink = [] if args.trace or args.cmd == "trace" else None
    rows = bench.run(scn, sink)
    path = _write(args, scn.name, rows, scn.metadata())
    if sink is not None:
        print(_dump_traces(args, scn.name, sink))
    sys.stdout.write(summary(rows))
    print(path)
    return 0


def cmd_sweep(args) -> int:
    scn = _scenario(args)
    ns = [int(x) for x in args.n_ranks.split(",")] if args.n_ranks else list(scn.n_ranks)
    sizes = [parse_size(x) for x in args.sizes.split(",")] if args.sizes else list(scn.sizes)
    rows = []
    for n, size in itertools.product(ns, sorted(sizes)):
        # one isolated simulation per point
        rows += bench.run(replace(scn, n_ranks=(n,), sizes=(size,)).validate())
    meta = dict(scn.metadata(), sweep_n_ranks=ns, sweep_sizes=sorted(sizes))
    path = _write(args, f"{scn.name}_sweep", rows, meta)
    sys.stdout.write(summary(rows))
    print(path)
    return 0


def cmd_compare(args) -> int:
    results = []
    if args.results:
        try:
            with open(args.results) as fh:
                results = from_csv(fh.read())
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read results: {exc}") from None
    elif args.scenario or args.scenario_file:
        results = bench.run(_scenario(args))
    rows = cmp.compare(results)
    path = _write(args, "compare", rows, flag=cmp.FLAG_PCT)
    sys.stdout.write(summary(rows, cmp.FLAG_PCT))
    print(path)
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare, "trace": cmd_run}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            parser.print_usage(sys.stderr)
            raise UsageError("exanet: error: missing subcommand")
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"exanet: {exc}", file=sys.stderr)
        return 1
    except (ScenarioInvalid, bench.BadRankCount, DeadlockDetected) as exc:
        print(f"exanet: invalid scenario: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # bad MPSoC names, rank counts that do not fit, ...
        print(f"exanet: invalid scenario: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
