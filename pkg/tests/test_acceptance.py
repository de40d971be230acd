"""End-to-end acceptance checks; each test records one pass/fail line.

The simulation criteria share one trial cache, so the whole module takes
tens of minutes on a single core.
"""
import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from sloscale.autoscaler import shrink
from sloscale.harness import (REFERENCE_SO_RANKING, kendall_tau_distance, random_snapshot,
                              run_trial, validate_queueing)
from sloscale.latency import QueueInput, mdc_latency, min_replicas_mdc, upper_bound_replicas
from sloscale.objectives import (AllocationPlan, ClusterObjectiveSpec, ClusterProblem, Form,
                                 JobSpec, ObjectiveKind, ResourceLimits)
from sloscale.scenario import POLICIES, ScenarioConfig
from sloscale.solver import (SolverConfig, feasible_start, hierarchical_solve, integerize,
                             solve_problem)
from sloscale.utility import Slo

SEEDS = range(5)
CAPACITIES = (16, 24, 32, 36, 40)
BASELINES = ("fairshare", "oneshot", "aiad", "mark")


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


class TrialCache:
    def __init__(self):
        self.runs = {}

    def get(self, policy, capacity, seed):
        key = (policy, capacity, seed)
        if key not in self.runs:
            cfg = ScenarioConfig.from_dict({"policy": policy, "workload": {},
                                            "cluster": {"replicas": capacity}})
            t0 = time.perf_counter()
            report = run_trial(cfg, seed)
            self.runs[key] = (report, time.perf_counter() - t0)
        return self.runs[key]


@pytest.fixture(scope="module")
def trials():
    return TrialCache()


def best_time(fn, repeats=20):
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def test_c1_sizing_example():
    lam, p, s, k = 40.0, 0.15, 0.6, 0.9999
    ub = upper_bound_replicas(lam, p, s)
    # scan oracle straight over the latency model
    scan = next(n for n in range(1, 100) if n * 1.0 / p > lam
                and mdc_latency(QueueInput(p, lam, n, k)) <= s)
    mdc = min_replicas_mdc(lam, p, s, k)
    slowest = max(best_time(lambda: upper_bound_replicas(lam, p, s)),
                  best_time(lambda: min_replicas_mdc(lam, p, s, k)))
    ok = ub == 10 and scan == 8 and mdc == 8 and slowest < 1e-3
    record(1, ok, f"upper bound {ub}, M/D/c {mdc} (scan {scan}), {slowest * 1e6:.0f} us")


def test_c2_queueing_oracle():
    # at 10^6 arrivals the rho=0.9, k=0.99 estimates have a ~4% seed-to-seed spread,
    # so the pass/fail decision uses 10^7 and the 10^6 result is reported alongside
    short = max(r["rel_error"] for r in validate_queueing(arrivals=1_000_000))
    t0 = time.perf_counter()
    rows = validate_queueing(arrivals=10_000_000)
    elapsed = time.perf_counter() - t0
    worst = max(r["rel_error"] for r in rows)
    ok = len(rows) == 24 and worst <= 0.05 and elapsed < 120
    record(2, ok, f"max relative error {worst:.4f} over {len(rows)} cases at 10^7 arrivals "
           f"({elapsed:.1f} s); {short:.4f} at 10^6")


SOLVER_KINDS = (ObjectiveKind.SUM, ObjectiveKind.FAIR_SUM, ObjectiveKind.PENALTY_SUM,
                ObjectiveKind.PENALTY_FAIR_SUM)
DROP_GRID = (0.0, 0.01, 0.05, 0.1)


def small_instance(seed):
    rng = np.random.default_rng(seed)
    kind = SOLVER_KINDS[seed % 4]
    capacity = int(rng.integers(6, 13))
    jobs, loads = [], []
    for i in range(3):
        p = rng.uniform(0.05, 0.3)
        jobs.append(JobSpec(f"j{i}", p, Slo(p * rng.uniform(2, 6))))
        lam = rng.uniform(0.3, 4.0) / p
        loads.append(np.maximum(lam * (1 + 0.15 * rng.standard_normal((20, 3))), 0))
    return kind, capacity, jobs, loads


def enumerate_best(problem, capacity, drops):
    best = -np.inf
    for x in itertools.product(range(1, capacity - 1), repeat=3):
        if sum(x) > capacity:
            continue
        for d in itertools.product(drops, repeat=3):
            best = max(best, problem.value(np.array(x, float), np.array(d)))
    return best


def test_c3_solver_matches_enumeration():
    worst_gap, slowest, failures = 0.0, 0.0, []
    for seed in range(20):
        kind, capacity, jobs, loads = small_instance(seed)
        limits = ResourceLimits.for_replicas(capacity)
        spec = ClusterObjectiveSpec(kind)
        relaxed = ClusterProblem(jobs, loads, spec, limits)
        precise = ClusterProblem(jobs, loads, spec.with_form(Form.PRECISE), limits)
        drops = DROP_GRID if kind.uses_drops else (0.0,)
        t0 = time.perf_counter()
        result = solve_problem(relaxed, feasible_start(relaxed), SolverConfig())
        plan = integerize(result.plan, jobs, limits, relaxed,
                          list(drops) if kind.uses_drops else None)
        slowest = max(slowest, time.perf_counter() - t0)
        got, best = precise(plan), enumerate_best(precise, capacity, drops)
        gap = (best - got) / abs(best) if best else float(best - got)
        worst_gap = max(worst_gap, gap)
        if gap > 0.05:
            failures.append(seed)
    ok = not failures and slowest < 1.0
    record(3, ok, f"worst gap {worst_gap:.4f} over 20 instances, slowest {slowest:.3f} s"
           + (f", failing seeds {failures}" if failures else ""))


def test_c4_relaxation_removes_plateaus():
    jobs, loads = random_snapshot(10, 0)
    limits = ResourceLimits.for_replicas(32)
    x = np.full(10, 3.2)
    flat = []
    for kind in SOLVER_KINDS:
        relaxed = ClusterProblem(jobs, loads, ClusterObjectiveSpec(kind), limits)
        u = relaxed.utilities(x)
        h = 1e-3
        for i in np.flatnonzero(u < 1.0):
            step = np.zeros(10)
            step[i] = h
            if relaxed.value(x + step) == relaxed.value(x):
                flat.append((kind.value, int(i)))

    spec = ClusterObjectiveSpec(ObjectiveKind.SUM)
    relaxed = ClusterProblem(jobs, loads, spec, limits)
    precise = ClusterProblem(jobs, loads, spec.with_form(Form.PRECISE), limits)
    cfg = SolverConfig()
    via_relaxed = solve_problem(relaxed, feasible_start(relaxed), cfg)
    via_precise = solve_problem(precise, feasible_start(precise), cfg)
    a_cont, b_cont = precise(via_relaxed.plan), precise(via_precise.plan)
    a_int = precise(integerize(via_relaxed.plan, jobs, limits, relaxed))
    b_int = precise(integerize(via_precise.plan, jobs, limits, precise))
    ok = not flat and a_cont >= b_cont - 1e-9 and a_int >= b_int - 1e-9
    record(4, ok, f"zero slopes {flat or 'none'}; precise value relaxed-route "
           f"{a_cont:.3f}/{a_int:.3f} vs precise-route {b_cont:.3f}/{b_int:.3f} "
           "(continuous/integer)")


def test_c5_hierarchical_scaling():
    n = 100
    jobs, loads = random_snapshot(n, 0)
    limits = ResourceLimits.for_replicas(320)
    spec = ClusterObjectiveSpec(ObjectiveKind.SUM)
    full = ClusterProblem(jobs, loads, spec, limits)
    out = {}
    for groups in (n, 10, 1):
        t0 = time.perf_counter()
        result = hierarchical_solve(jobs, loads, limits, spec, SolverConfig(group_count=groups))
        elapsed = time.perf_counter() - t0
        out[groups] = (elapsed, full(integerize(result.plan, jobs, limits, full)))
    (t_flat, v_flat), (t_g10, v_g10), (t_g1, v_g1) = out[n], out[10], out[1]
    speedup = t_flat / t_g10
    rel = (v_flat - v_g10) / abs(v_flat)
    ok = speedup >= 5 and rel <= 0.10
    record(5, ok, f"10 groups {t_g10:.2f} s vs ungrouped {t_flat:.2f} s ({speedup:.1f}x), "
           f"objective {v_g10:.3f} vs {v_flat:.3f} ({rel:+.3%}); one group {t_g1:.2f} s, "
           f"{v_g1:.3f}")


def policy_means(trials, capacity, seeds):
    return {p: float(np.mean([trials.get(p, capacity, s)[0].mean_lost_utility for s in seeds]))
            for p in POLICIES}


def test_c6_end_to_end_ranking(trials):
    lost = policy_means(trials, 32, SEEDS)
    ranking = sorted(POLICIES, key=lambda p: (lost[p], p))
    distance = kendall_tau_distance(ranking, REFERENCE_SO_RANKING)
    beats = all(lost[f] < lost[b] for f in ("faro-fairsum", "faro-sum") for b in BASELINES)
    slowest = max(trials.get(p, 32, s)[1] for p in POLICIES for s in SEEDS)
    ok = beats and distance <= 0.25 and slowest < 300
    table = ", ".join(f"{p} {lost[p]:.3f}" for p in ranking)
    record(6, ok, f"Kendall-Tau {distance:.3f}; slowest day {slowest:.0f} s; {table}")


def test_c7_oversubscription_trend(trials):
    utility = {p: [trials.get(p, c, 0)[0].mean_cluster_utility for c in CAPACITIES]
               for p in POLICIES}
    bad = []
    for p, series in utility.items():
        drops = [a - b for a, b in zip(series, series[1:]) if b < a]
        if len(drops) > 1 or any(d > 0.1 for d in drops):
            bad.append(p)
    sum_vs_fair = utility["faro-sum"][0] - utility["faro-fair"][0]
    ok = not bad and sum_vs_fair >= 0
    detail = "; ".join(f"{p} " + "/".join(f"{u:.2f}" for u in s) for p, s in utility.items())
    record(7, ok, f"non-monotone {bad or 'none'}; sum-fair at 16 {sum_vs_fair:+.3f}; {detail}")


def shrink_state(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    jobs = [JobSpec(f"j{i}", rng.uniform(0.05, 0.3), Slo(rng.uniform(0.4, 1.2)))
            for i in range(n)]
    loads = [np.maximum(rng.uniform(0.2, 3.0) / j.service_time
                        * (1 + 0.2 * rng.standard_normal((8, 3))), 0) for j in jobs]
    kind = list(ObjectiveKind)[int(rng.integers(0, 5))]
    plan = AllocationPlan(rng.integers(1, 25, n).astype(float),
                          rng.choice([0.0, 0.01, 0.05], n) if kind.uses_drops else None)
    return jobs, loads, ClusterObjectiveSpec(kind), plan


def test_c8_shrink_fixpoint_and_minimality():
    failures = []
    for seed in range(100):
        jobs, loads, spec, plan = shrink_state(seed)
        problem = ClusterProblem(jobs, loads, spec)
        once = shrink(plan, jobs, loads, spec)
        if shrink(once, jobs, loads, spec) != once:
            failures.append((seed, "not idempotent"))
        u = problem.utilities(once.replicas, once.drop_rates)
        for i in np.flatnonzero((u >= 1.0 - 1e-9) & (once.replicas > 1)):
            lower = once.replicas.copy()
            lower[i] -= 1
            if abs(problem.value(lower, once.drop_rates) - problem(once)) <= 1e-9:
                failures.append((seed, f"job {i} not minimal"))
    record(8, not failures, f"100 states, failures {failures or 'none'}")


def test_c9_utility_below_satisfaction(trials):
    held, total, worst = 0, 0, (2.0, "")
    for p in POLICIES:
        for s in SEEDS:
            rep = trials.get(p, 32, s)[0]
            ok = rep.minute_utility <= rep.minute_satisfaction + 0.02
            held += int(ok.sum())
            total += ok.size
            worst = min(worst, (float(ok.mean()), f"{p} seed {s}"))
    frac = held / total
    record(9, frac >= 0.95, f"{frac:.4f} of {total} job-minutes hold; lowest run "
           f"{worst[0]:.4f} ({worst[1]})")


def test_c10_byte_identical_reruns(trials):
    mismatched = []
    for policy in ("faro-fairsum", "fairshare"):
        first = trials.get(policy, 32, 0)[0]
        cfg = ScenarioConfig.from_dict({"policy": policy, "workload": {},
                                        "cluster": {"replicas": 32}})
        again = run_trial(cfg, 0)
        if again.to_json() != first.to_json() or again.digest() != first.digest():
            mismatched.append(policy)
    record(10, not mismatched, f"reruns differ for {mismatched or 'no policy'}")
