"""Command-line entry point.

Exit codes: 0 success, 1 an asserted monitor check failed, 2 the engine
halted on an infeasible local problem, 3 I/O failure, 4 invalid scenario.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .scenario import (
    EXIT_CONFIG,
    EXIT_IO,
    ScenarioError,
    analyze_topology,
    compare_summaries,
    load_scenario,
    load_summary,
    preset_names,
    run_scenario,
)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="platoon-dmpc", description="Distributed MPC platoon simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one or more scenarios")
    r.add_argument("--scenario", action="append", required=True, help="scenario file or preset name (repeatable)")
    r.add_argument("--steps", type=int, default=None, help="override the number of steps")
    r.add_argument("--out", default="runs", help="output directory (one subfolder per scenario)")
    r.add_argument("--no-monitor", action="store_true", help="skip the stability checks")
    r.add_argument("--threads", type=int, default=None, help="worker threads for the local solves of one step")
    r.add_argument("--jobs", type=int, default=1, help="scenarios to run in parallel processes")

    p = sub.add_parser("presets", help="bundled scenarios")
    p.add_argument("action", choices=["list"])

    c = sub.add_parser("compare", help="tabulate summary.json files")
    c.add_argument("summaries", nargs="+")
    c.add_argument("--format", choices=["text", "csv"], default="text")

    t = sub.add_parser("topo", help="topology analysis without simulating")
    t.add_argument("action", choices=["analyze"])
    t.add_argument("--scenario", required=True)
    return ap


def _load(ref: str):
    """Scenario or an ``(exit code, message)`` pair."""
    try:
        return load_scenario(ref)
    except ScenarioError as e:
        return EXIT_CONFIG, f"{ref}: {e}"
    except OSError as e:
        return EXIT_IO, f"{ref}: {e}"


def _run_one(job):
    ref, out, steps, monitor, threads = job
    cfg = _load(ref)
    if isinstance(cfg, tuple):
        return cfg[0], cfg[1], None
    if steps is not None and steps < 1:
        return EXIT_CONFIG, f"{ref}: --steps must be >= 1", None
    try:
        res = run_scenario(cfg, Path(out) / cfg.name, steps=steps, monitor=monitor, threads=threads)
    except OSError as e:
        return EXIT_IO, f"{ref}: {e}", None
    s = res.summary
    line = (
        f"{cfg.name}: {s.status}, {s.steps} steps, max |spacing err| {max(s.max_spacing_error):.4f} m, "
        f"failed checks {s.monitor['asserted_failed']}, exit {res.exit_code}"
    )
    if res.diagnostic:
        line += f"\n  diagnostic: {json.dumps(res.diagnostic)}"
    return res.exit_code, line, res.files.get("summary")


def cmd_run(args) -> int:
    monitor = False if args.no_monitor else None
    jobs = [(ref, args.out, args.steps, monitor, args.threads) for ref in args.scenario]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    code = 0
    for rc, line, _ in results:
        print(line, file=sys.stdout if rc in (0, 1) else sys.stderr)
        code = max(code, rc)
    return code


def cmd_compare(args) -> int:
    try:
        summaries = [load_summary(p) for p in args.summaries]
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as e:
        print(f"error: bad summary file: {e}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(compare_summaries(summaries, args.format))
    return 0


def cmd_topo(args) -> int:
    cfg = _load(args.scenario)
    if isinstance(cfg, tuple):
        print(f"error: {cfg[1]}", file=sys.stderr)
        return cfg[0]
    print(json.dumps(analyze_topology(cfg), indent=1))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    if args.command == "compare":
        return cmd_compare(args)
    return cmd_topo(args)


if __name__ == "__main__":
    sys.exit(main())
