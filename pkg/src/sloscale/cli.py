"""Command-line entry point: ``sloscale {run,compare,validate-queueing,bench-solver,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import harness
from .scenario import POLICIES, ConfigError, ScenarioConfig

_LOGGER = logging.getLogger(__name__)


def _load_scenario(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.scenario)
    changes = {}
    if args.policy is not None:
        changes["policy"] = args.policy
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    return replace(cfg, **changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _load_scenario(args)
    agg = harness.run_experiment(cfg, Path(args.out), args.parallel)
    m = agg["metrics"]
    print(f"{cfg.policy}: lost utility {m['mean_lost_utility']['mean']:.4f} "
          f"(sd {m['mean_lost_utility']['sd']:.4f}), violation rate "
          f"{m['cluster_violation_rate']['mean']:.4f}")
    if agg["partial"]:
        print(f"failed trials: {agg['failed_trials']}", file=sys.stderr)
        return 1
    return 0


def cmd_compare(args) -> int:
    aggregates = [json.loads(Path(p).read_text()) for p in args.reports]
    reference = harness.REFERENCE_SO_RANKING if args.reference == "so" else (
        args.reference.split(",") if args.reference else None)
    table = harness.compare(aggregates, reference)
    print(harness.format_table(table))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "comparison.json").write_text(json.dumps(table, indent=2))
    return 0


def cmd_validate_queueing(args) -> int:
    rows = harness.validate_queueing(arrivals=args.arrivals, seed=args.seed or 0)
    worst = 0.0
    for r in rows:
        worst = max(worst, r["rel_error"])
        print(f"c={r['servers']} rho={r['rho']:.2f} k={r['k']:.2f} "
              f"model={r['model']:.5f} sim={r['simulated']:.5f} err={r['rel_error']:.4f}")
    print(f"max relative error: {worst:.4f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "queueing.json").write_text(json.dumps(rows, indent=2))
    return 0 if worst <= args.tolerance else 1


def cmd_bench_solver(args) -> int:
    counts = [int(c) for c in args.jobs.split(",")]
    rows = harness.bench_solver(counts, (None, args.groups), seed=args.seed or 0)
    for r in rows:
        print(f"jobs={r['jobs']:>4} groups={r['groups']:>4} seconds={r['seconds']:.3f} "
              f"objective={r['objective']:.4f} evals={r['evaluations']}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench_solver.json").write_text(json.dumps(rows, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_scenario(args)
    summary = harness.ablate(cfg, Path(args.out), args.parallel)
    for name, metrics in summary.items():
        print(f"{name:<18} lost utility {metrics['mean_lost_utility']['mean']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sloscale", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("scenario_pos", nargs="?", metavar="SCENARIO")
        p.add_argument("--scenario", help="scenario JSON file")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--seed", type=int, help="first trial seed")
        p.add_argument("--trials", type=int, help="number of trials")
        p.add_argument("--parallel", type=int, default=1, help="concurrent trials")
        p.add_argument("--policy", choices=POLICIES, help="override the scenario policy")

    p = sub.add_parser("run", help="simulate a scenario")
    scenario_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep the six planner ablation flags")
    scenario_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="rank aggregate reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--reference", help="'so' or a comma-separated policy ranking")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate-queueing", help="M/M/c wait quantiles vs simulation")
    p.add_argument("--arrivals", type=int, default=1_000_000)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate_queueing)

    p = sub.add_parser("bench-solver", help="solver wall-clock vs job count")
    p.add_argument("--jobs", default="10,20,50,100")
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_solver)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "scenario_pos", None) and not args.scenario:
        args.scenario = args.scenario_pos
    if args.command in ("run", "ablate") and not args.scenario:
        parser.error("a scenario file is required")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
