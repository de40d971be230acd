"""Experiment orchestration: trials, aggregate reports, rankings, queueing and solver checks."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numba
import numpy as np

from .latency import QueueInput, mmc_wait_quantile
from .objectives import ClusterObjectiveSpec, JobSpec, ObjectiveKind, ResourceLimits
from .scenario import ScenarioConfig, build_workload, make_policy
from .simulator import MetricsReport, _jsonable, run_scenario
from .solver import SolverConfig, hierarchical_solve
from .utility import Slo

_LOGGER = logging.getLogger(__name__)

# simulated lost-utility ordering (best first) for 10 jobs on 32 replicas
REFERENCE_SO_RANKING = ("faro-fairsum", "faro-fair", "faro-sum", "faro-penaltysum",
                        "faro-penaltyfairsum", "aiad", "mark", "fairshare", "oneshot")
SUMMARY_METRICS = ("mean_lost_utility", "mean_cluster_utility", "cluster_violation_rate")


def kendall_tau_distance(ranking_a: Sequence[str], ranking_b: Sequence[str]) -> float:
    """Fraction of item pairs ordered differently by the two rankings."""
    if len(set(ranking_a)) != len(ranking_a) or set(ranking_a) != set(ranking_b) \
            or len(ranking_a) != len(ranking_b):
        raise ValueError("rankings must order the same set of distinct items")
    n = len(ranking_a)
    if n < 2:
        return 0.0
    pos = {item: i for i, item in enumerate(ranking_b)}
    discordant = sum(1 for a, b in combinations(ranking_a, 2) if pos[a] > pos[b])
    return discordant / (n * (n - 1) / 2)


def run_trial(cfg: ScenarioConfig, seed: int) -> MetricsReport:
    jobs, evals, hists = build_workload(cfg)
    duration = len(evals[0].values) * evals[0].interval
    report = run_scenario(evals, jobs, make_policy(cfg, jobs, seed),
                          cfg.sim_config(duration, seed), hists)
    report.config = _jsonable({"scenario": cfg.to_dict(), "sim": report.config,
                               "trial_seed": seed})
    return report


def _trial_worker(args):
    cfg, seed = args
    try:
        return seed, run_trial(cfg, seed), None
    except Exception as exc:  # a failed trial is reported, not fatal to the sweep
        _LOGGER.exception("trial with seed %s failed", seed)
        return seed, None, f"{type(exc).__name__}: {exc}"


def aggregate(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    out = {}
    for metric in SUMMARY_METRICS:
        vals = [getattr(r, metric) for r in reports]
        out[metric] = {"mean": float(np.mean(vals)) if vals else math.nan,
                       "sd": float(statistics.stdev(vals)) if len(vals) > 1 else 0.0}
    return out


def run_experiment(cfg: ScenarioConfig, out_dir: Optional[Path] = None,
                   parallel: int = 1) -> dict:
    """Run ``cfg.trials`` seeds starting at ``cfg.seed``; write per-trial and aggregate files."""
    seeds = [cfg.seed + t for t in range(cfg.trials)]
    tasks = [(cfg, s) for s in seeds]
    if parallel > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_trial_worker, tasks))
    else:
        results = [_trial_worker(t) for t in tasks]
    reports = [r for _, r, err in results if r is not None]
    failures = {str(s): err for s, _, err in results if err is not None}
    agg = {
        "scenario": _jsonable(cfg.to_dict()),
        "policy": cfg.policy,
        "seeds": seeds,
        "metrics": aggregate(reports),
        "failed_trials": failures,
        "partial": bool(failures),
        "trials": [{"seed": s, "digest": r.digest(), **r.summary()}
                   for s, r, _ in results if r is not None],
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for seed, rep, _ in results:
            if rep is None:
                continue
            tdir = out_dir / f"{cfg.policy}-seed{seed}"
            tdir.mkdir(exist_ok=True)
            (tdir / "report.json").write_text(rep.to_json())
            for j, job_id in enumerate(rep.job_ids):
                with open(tdir / f"{job_id}.csv", "w", newline="") as fh:
                    csv.writer(fh).writerows(rep.job_csv_rows(j))
        (out_dir / f"{cfg.policy}-aggregate.json").write_text(
            json.dumps(_jsonable(agg), sort_keys=True, indent=2))
    return agg


def compare(aggregates: Sequence[dict], reference: Optional[Sequence[str]] = None) -> dict:
    """Rank policies by a metric (lower lost utility is better)."""
    if not aggregates:
        raise ValueError("nothing to compare")
    keys = {json.dumps({k: v for k, v in a["scenario"].items() if k not in ("policy",)},
                       sort_keys=True) for a in aggregates}
    if len(keys) > 1:
        raise ValueError("incompatible scenarios: reports differ beyond the policy")
    rows = []
    for a in aggregates:
        rows.append({"policy": a["policy"],
                     "lost_utility": a["metrics"]["mean_lost_utility"]["mean"],
                     "lost_utility_sd": a["metrics"]["mean_lost_utility"]["sd"],
                     "violation_rate": a["metrics"]["cluster_violation_rate"]["mean"],
                     "violation_rate_sd": a["metrics"]["cluster_violation_rate"]["sd"]})
    rows.sort(key=lambda r: (r["lost_utility"], r["policy"]))
    for rank, r in enumerate(rows, start=1):
        r["rank"] = rank
    ranking = [r["policy"] for r in rows]
    out = {"rows": rows, "ranking": ranking}
    if reference is not None:
        shared = [p for p in reference if p in ranking]
        ours = [p for p in ranking if p in shared]
        out["kendall_tau_distance"] = kendall_tau_distance(ours, shared)
    return out


def format_table(table: dict) -> str:
    lines = [f"{'rank':>4}  {'policy':<22}{'lost utility':>18}{'violation rate':>20}"]
    for r in table["rows"]:
        lines.append(f"{r['rank']:>4}  {r['policy']:<22}"
                     f"{r['lost_utility']:>10.3f} ({r['lost_utility_sd']:.3f})"
                     f"{r['violation_rate']:>12.4f} ({r['violation_rate_sd']:.4f})")
    if "kendall_tau_distance" in table:
        lines.append(f"Kendall-Tau distance to reference: {table['kendall_tau_distance']:.4f}")
    return "\n".join(lines)


# -- queueing validation ----------------------------------------------------

@numba.njit(cache=True)
def _mmc_waits(lam, mu, c, n, seed):
    np.random.seed(seed)
    free = np.zeros(c)
    waits = np.empty(n)
    t = 0.0
    for i in range(n):
        t += np.random.exponential(1.0 / lam)
        j = np.argmin(free)
        start = max(t, free[j])
        waits[i] = start - t
        free[j] = start + np.random.exponential(1.0 / mu)
    return waits


def simulate_mmc_wait_quantiles(service_time: float, arrival_rate: float, servers: int,
                                percentiles: Sequence[float], arrivals: int = 1_000_000,
                                seed: int = 0, warmup: float = 0.01) -> List[float]:
    """Empirical FCFS M/M/c waiting-time quantiles from a discrete-event run."""
    waits = _mmc_waits(arrival_rate, 1.0 / service_time, servers, arrivals, seed)
    waits = waits[int(warmup * arrivals):]
    return [float(np.quantile(waits, k)) for k in percentiles]


def validate_queueing(servers=(1, 2, 4, 8), utilizations=(0.5, 0.75, 0.9),
                      percentiles=(0.9, 0.99), arrivals: int = 1_000_000,
                      service_time: float = 1.0, seed: int = 0) -> List[dict]:
    rows = []
    for c in servers:
        for rho in utilizations:
            lam = rho * c / service_time
            sim = simulate_mmc_wait_quantiles(service_time, lam, c, percentiles, arrivals,
                                              seed + 31 * c + int(rho * 100))
            for k, s in zip(percentiles, sim):
                model = mmc_wait_quantile(QueueInput(service_time, lam, c, k))
                if model == 0.0 and s == 0.0:
                    err = 0.0
                else:
                    err = abs(model - s) / max(abs(s), 1e-12)
                rows.append({"servers": c, "rho": rho, "k": k, "model": model,
                             "simulated": s, "rel_error": err})
    return rows


# -- solver scaling -----------------------------------------------------------

def random_snapshot(n_jobs: int, seed: int, samples: int = 100, horizon: int = 7,
                    service_time: float = 0.18, slo: float = 0.72):
    """Jobs and load samples (requests/second) for solver experiments."""
    rng = np.random.default_rng(seed)
    jobs = [JobSpec(f"job{i:03d}", service_time, Slo(slo)) for i in range(n_jobs)]
    means = rng.uniform(1, 1600, n_jobs) / 60.0
    loads = [np.maximum(m * (1 + 0.2 * rng.standard_normal((samples, horizon))), 0.0)
             for m in means]
    return jobs, loads


def bench_solver(job_counts=(10, 20, 50, 100), group_counts=(None, 10), capacity_ratio=3.2,
                 seed: int = 0, kind: str = "sum") -> List[dict]:
    """Wall-clock and objective of the hierarchical solve; ``None`` groups means one per job."""
    rows = []
    spec = ClusterObjectiveSpec(ObjectiveKind(kind))
    for n in job_counts:
        jobs, loads = random_snapshot(n, seed)
        limits = ResourceLimits.for_replicas(int(capacity_ratio * n))
        from .objectives import ClusterProblem
        full = ClusterProblem(jobs, loads, spec, limits)
        for g in group_counts:
            groups = n if g is None else g
            t0 = time.perf_counter()
            result = hierarchical_solve(jobs, loads, limits, spec,
                                        SolverConfig(group_count=groups, seed=seed))
            elapsed = time.perf_counter() - t0
            rows.append({"jobs": n, "groups": groups, "seconds": elapsed,
                         "objective": full(result.plan), "evaluations": result.evaluations})
    return rows


# -- ablation ------------------------------------------------------------------

ABLATION_FLAGS = ("relaxation", "mdc_model", "prediction", "probabilistic", "hybrid", "shrink")


def ablate(cfg: ScenarioConfig, out_dir: Optional[Path] = None, parallel: int = 1) -> dict:
    """Full system plus one run per disabled component."""
    if not cfg.policy.startswith("faro-"):
        raise ValueError("ablation needs a faro-* policy")
    results = {"full": run_experiment(cfg, None, parallel)}
    for flag in ABLATION_FLAGS:
        variant = replace(cfg, ablation=replace(cfg.ablation, **{flag: False}))
        results[f"no-{flag}"] = run_experiment(variant, None, parallel)
    summary = {name: agg["metrics"] for name, agg in results.items()}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(
            json.dumps(_jsonable({"scenario": cfg.to_dict(), "variants": summary}),
                       sort_keys=True, indent=2))
    return summary
