"""Command line: ``numasched {daemon,simulate,check-topology}``.

Exit codes: 0 ok, 1 runtime failure, 2 usage, config or topology error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .config import DaemonConfig, parse_config
from .daemon import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, run_daemon
from .errors import NumaSchedError
from .logfmt import configure_logging
from .topology import discover_topology

log = logging.getLogger(__name__)

POLICY_CHOICES = ("noop", "static-pin", "auto-balance", "proposed", "all")
DEFAULT_HORIZON = 1000.0


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="numasched",
                                     description="User-space NUMA-aware task and page scheduler.")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("daemon", help="monitor tasks and rebalance them across NUMA nodes")
    d.add_argument("--config", metavar="PATH", help="JSON configuration file")
    d.add_argument("--interval", metavar="MS", type=_positive_int,
                   help="monitoring interval in milliseconds")
    d.add_argument("--dry-run", action="store_true", help="log plans without applying them")
    d.add_argument("--proc-root", metavar="PATH")
    d.add_argument("--sysfs-root", metavar="PATH")
    d.add_argument("--log-format", choices=("text", "json"))

    s = sub.add_parser("simulate", help="compare scheduling policies on a simulated host")
    s.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    s.add_argument("--policy", choices=POLICY_CHOICES, default="all")
    s.add_argument("--horizon", metavar="SECONDS", type=float, default=DEFAULT_HORIZON,
                   help="simulated time limit (default %(default)s)")
    s.add_argument("--out", metavar="PATH", help="write the result JSON here instead of stdout")

    t = sub.add_parser("check-topology", help="print the discovered NUMA topology")
    t.add_argument("--sysfs-root", metavar="PATH", default="/sys")
    return parser


def _cmd_daemon(args) -> int:
    try:
        if args.config:
            with open(args.config) as f:
                config = parse_config(f.read())
        else:
            config = DaemonConfig()
        config = config.with_overrides(
            interval_ms=args.interval,
            dry_run=True if args.dry_run else None,
            proc_root=args.proc_root,
            sysfs_root=args.sysfs_root,
            log_format=args.log_format,
        )
    except (OSError, NumaSchedError) as exc:
        print(f"numasched: {exc}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(config.log_format)
    return run_daemon(config)


def _summary(name: str, results) -> str:
    def fmt(x):
        return "unfinished" if x is None else f"{x:.1f}"
    parts = [f"{r.policy} makespan={fmt(r.makespan)}" for r in results]
    return f"{name}: " + ", ".join(parts)


def _cmd_simulate(args, parser) -> int:
    from .hostsim import experiment_document, read_scenario, run_all
    from .hostsim.experiment import POLICIES

    if not args.horizon > 0:
        parser.error("--horizon must be positive")
    try:
        host, _ = read_scenario(args.scenario)
    except (OSError, NumaSchedError) as exc:
        print(f"numasched: bad scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    policies = POLICIES if args.policy == "all" else (args.policy,)
    try:
        results = run_all(host, args.horizon, policies)
    except NumaSchedError as exc:
        print(f"numasched: simulation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    doc = experiment_document(results, host.name, args.horizon)
    if args.out:
        with open(args.out, "w") as f:
            f.write(doc)
        print(_summary(host.name, results))
    else:
        sys.stdout.write(doc)
        print(_summary(host.name, results), file=sys.stderr)
    return EXIT_OK


def _cmd_check_topology(args) -> int:
    try:
        topo = discover_topology(args.sysfs_root)
    except (OSError, NumaSchedError) as exc:
        print(f"numasched: no NUMA topology: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(topo.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "daemon":
        return _cmd_daemon(args)
    if args.command == "simulate":
        return _cmd_simulate(args, parser)
    return _cmd_check_topology(args)


if __name__ == "__main__":
    sys.exit(main())
