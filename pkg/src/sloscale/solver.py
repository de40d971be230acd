"""Constrained derivative-free solving of the relaxed cluster objective.

``solve_relaxed`` runs COBYLA (scipy) on replica counts and, optionally,
drop rates. ``hierarchical_solve`` shrinks the variable count by solving
over random job groups and splitting each group's replica budget by work
share. ``integerize`` turns a continuous plan into a feasible integer one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .objectives import (AllocationPlan, ClusterObjectiveSpec, ClusterProblem, JobSpec,
                         ResourceLimits)
from .utility import Slo

_LOGGER = logging.getLogger(__name__)

# drop rates are optimised as DROP_SCALE * d so a trust-region step of 2
# replicas corresponds to a 0.2 change in drop rate
DROP_SCALE = 10.0
FEASIBILITY_RTOL = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 1000
    initial_step: float = 2.0
    group_count: int = 10
    seed: int = 0
    tolerance: float = 1e-3
    restarts: int = 2  # extra random feasible starts in solve_problem

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.initial_step > 0:
            raise ValueError("initial_step must be > 0")
        if self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


@dataclass
class SolveResult:
    plan: AllocationPlan
    value: float
    evaluations: int
    degraded: bool = False
    message: str = ""


def solve_relaxed(objective: Callable[[AllocationPlan], float],
                  constraints: Callable[[AllocationPlan], Sequence[float]],
                  initial: AllocationPlan, config: SolverConfig = SolverConfig(),
                  optimize_drops: bool = False,
                  tolerances: Optional[Sequence[float]] = None) -> SolveResult:
    """Locally maximise ``objective`` subject to ``constraints(plan) >= 0``.

    Returns the best iterate whose residuals are all >= -tolerance. When the
    evaluation budget runs out the result is flagged ``degraded``.
    """
    n = len(initial)
    fixed_drops = initial.drop_rates.copy()

    def to_plan(v: np.ndarray) -> AllocationPlan:
        if optimize_drops:
            return AllocationPlan(v[:n], v[n:] / DROP_SCALE)
        return AllocationPlan(v[:n], fixed_drops)

    def clipped(plan: AllocationPlan) -> AllocationPlan:
        return AllocationPlan(np.maximum(plan.replicas, 1.0),
                              np.clip(plan.drop_rates, 0.0, 1.0))

    v0 = initial.replicas.copy()
    if optimize_drops:
        v0 = np.concatenate((v0, initial.drop_rates * DROP_SCALE))

    best = {"value": -math.inf, "v": None}
    n_evals = [0]

    def residuals(v):
        return np.asarray(constraints(to_plan(v)), dtype=float)

    tol = None if tolerances is None else np.asarray(tolerances, dtype=float)

    def feasible(res):
        if tol is None:
            return bool(np.all(res >= -1e-9))
        return bool(np.all(res >= -tol))

    def neg_objective(v):
        plan = to_plan(v)
        value = float(objective(clipped(plan)))
        n_evals[0] += 1
        if value > best["value"] and feasible(residuals(v)):
            best["value"] = value
            best["v"] = v.copy()
        return -value

    neg_objective(v0)
    res = minimize(neg_objective, v0, method="COBYLA",
                   constraints=[{"type": "ineq", "fun": residuals}],
                   options={"rhobeg": config.initial_step, "maxiter": config.max_iterations,
                            "tol": config.tolerance, "catol": 1e-7})
    degraded = not res.success
    if best["v"] is None:
        _LOGGER.warning("COBYLA found no feasible iterate: %s", res.message)
        return SolveResult(initial.copy(), float(objective(clipped(initial))), n_evals[0],
                           degraded=True, message=str(res.message))
    plan = clipped(to_plan(best["v"]))
    return SolveResult(plan, best["value"], n_evals[0], degraded, str(res.message))


def problem_tolerances(problem: ClusterProblem) -> np.ndarray:
    n = len(problem)
    tol = [np.full(n, FEASIBILITY_RTOL), np.full(n, FEASIBILITY_RTOL),
           np.full(n, FEASIBILITY_RTOL)]
    if problem.limits is not None:
        tol.insert(0, np.array([problem.limits.max_cpu, problem.limits.max_mem])
                   * FEASIBILITY_RTOL)
    return np.concatenate(tol)


def solve_problem(problem: ClusterProblem, initial: AllocationPlan,
                  config: SolverConfig = SolverConfig()) -> SolveResult:
    """``solve_relaxed`` wired to a :class:`ClusterProblem`.

    With ``config.restarts`` the solve is repeated from random capacity
    splits (seeded by ``config.seed``) and the best feasible result is kept.
    """
    def run(start):
        return solve_relaxed(problem, lambda plan: problem.residuals(plan.replicas,
                                                                     plan.drop_rates),
                             start, config, optimize_drops=problem.spec.kind.uses_drops,
                             tolerances=problem_tolerances(problem))

    best = run(initial)
    if config.restarts and problem.limits is not None:
        rng = np.random.default_rng([config.seed, 7919])
        budget = min(problem.limits.max_cpu / float(np.mean(problem.cpu)),
                     problem.limits.max_mem / float(np.mean(problem.mem)))
        evaluations = best.evaluations
        for _ in range(config.restarts):
            split = rng.dirichlet(np.ones(len(problem.jobs))) * budget
            result = run(feasible_start(problem, split))
            evaluations += result.evaluations
            if (best.degraded and not result.degraded) or (
                    result.degraded == best.degraded and result.value > best.value + 1e-12):
                best = result
        best = replace(best, evaluations=evaluations)
    return best


def feasible_start(problem: ClusterProblem, replicas: Optional[Sequence[float]] = None
                   ) -> AllocationPlan:
    """Clip a starting allocation into the feasible region (scaling down the excess).

    Without ``replicas`` the capacity is split over jobs by work share
    (mean load times service time), or every job starts at its minimum when
    the problem has no resource limits.
    """
    lo = problem.min_replicas
    if replicas is not None:
        x = np.maximum(np.asarray(replicas, float), lo)
    elif problem.limits is not None:
        budget = min(problem.limits.max_cpu / float(np.mean(problem.cpu)),
                     problem.limits.max_mem / float(np.mean(problem.mem)))
        work = problem.loads.mean(axis=(1, 2)) * problem.p
        x = np.maximum(_work_share_split(budget, work) * lo, lo) if np.all(lo == 1) \
            else lo + _work_share_split(max(budget - lo.sum(), 0.0) + len(lo), work) - 1.0
    else:
        x = lo.copy()
    if problem.limits is not None:
        for used, limit in ((problem.cpu, problem.limits.max_cpu),
                            (problem.mem, problem.limits.max_mem)):
            total = float(used @ x)
            floor = float(used @ lo)
            if total > limit and total > floor:
                scale = max(limit - floor, 0.0) / (total - floor)
                x = lo + (x - lo) * scale
    return AllocationPlan(x)


def partition_groups(n_jobs: int, group_count: int, seed: int) -> List[List[int]]:
    """Randomly split job indices into ``group_count`` balanced, non-empty groups."""
    g = min(group_count, n_jobs)
    if g >= n_jobs:
        return [[i] for i in range(n_jobs)]
    order = np.random.default_rng(seed).permutation(n_jobs)
    return [sorted(int(i) for i in chunk) for chunk in np.array_split(order, g)]


def _work_share_split(budget: float, work: np.ndarray) -> np.ndarray:
    """Split ``budget`` replicas proportionally to ``work`` with a floor of 1 each."""
    m = len(work)
    out = np.ones(m)
    free = np.ones(m, dtype=bool)
    remaining = budget
    while True:
        w = work[free]
        share = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
        alloc = remaining * share
        low = alloc < 1.0
        if not low.any():
            out[free] = alloc
            return out
        idx = np.flatnonzero(free)[low]
        out[idx] = 1.0
        free[idx] = False
        remaining -= len(idx)
        if not free.any():
            return out


def hierarchical_solve(jobs: Sequence[JobSpec], loads: Sequence, limits: ResourceLimits,
                       spec: ClusterObjectiveSpec, config: SolverConfig = SolverConfig(),
                       ready: Optional[Sequence[float]] = None, cold_steps: int = 0,
                       initial: Optional[Sequence[float]] = None) -> SolveResult:
    """Solve over ``config.group_count`` random groups and map back to jobs.

    Group arrival rates are summed sample-wise, service times and SLO
    targets averaged, priorities summed and replica footprints averaged by
    work share. Each group's replica budget is split over its members in
    proportion to arrival rate times service time.
    """
    n = len(jobs)
    groups = partition_groups(n, config.group_count, config.seed)
    cubes = [np.asarray(l, dtype=float).reshape(-1, np.shape(l)[-1]) if np.ndim(l) > 0
             else np.asarray(l, dtype=float).reshape(1, 1) for l in loads]
    if len(groups) == n:
        problem = ClusterProblem(jobs, cubes, spec, limits, ready=ready, cold_steps=cold_steps)
        start = feasible_start(problem, initial)
        return solve_problem(problem, start, config)

    work = np.array([float(np.mean(c)) * j.service_time for c, j in zip(cubes, jobs)])
    g_jobs, g_loads, g_ready, g_min, g_init = [], [], [], [], []
    for gi, members in enumerate(groups):
        w = work[members]
        wn = w / w.sum() if w.sum() > 0 else np.full(len(members), 1.0 / len(members))
        mj = [jobs[i] for i in members]
        g_jobs.append(JobSpec(
            id=f"group-{gi}",
            service_time=float(np.mean([j.service_time for j in mj])),
            slo=Slo(float(np.mean([j.slo.target_latency for j in mj])),
                    max(j.slo.percentile_k for j in mj)),
            priority=float(sum(j.priority for j in mj)),
            cpu_per_replica=float(wn @ [j.cpu_per_replica for j in mj]),
            mem_per_replica=float(wn @ [j.mem_per_replica for j in mj]),
        ))
        g_loads.append(np.sum([cubes[i] for i in members], axis=0))
        if ready is not None:
            g_ready.append(float(sum(ready[i] for i in members)))
        g_min.append(float(len(members)))
        if initial is not None:
            g_init.append(float(sum(initial[i] for i in members)))

    problem = ClusterProblem(g_jobs, g_loads, spec, limits,
                             ready=g_ready if ready is not None else None,
                             cold_steps=cold_steps, min_replicas=g_min)
    start = feasible_start(problem, g_init if initial is not None else None)
    result = solve_problem(problem, start, config)

    x = np.ones(n)
    d = np.zeros(n)
    for gi, members in enumerate(groups):
        x[members] = _work_share_split(result.plan.replicas[gi], work[members])
        d[members] = result.plan.drop_rates[gi]
    return SolveResult(AllocationPlan(x, d), result.value, result.evaluations,
                       result.degraded, result.message)


def integerize(plan: AllocationPlan, jobs: Sequence[JobSpec], limits: ResourceLimits,
               objective: Callable[[AllocationPlan], float],
               drop_candidates: Optional[Sequence[float]] = None) -> AllocationPlan:
    """Round a continuous plan to a feasible integer allocation.

    Floors every count (minimum 1), repairs infeasibility by taking replicas
    from the largest fractional parts, then repeatedly grants +1 to the job
    with the largest objective gain per vCPU while capacity remains and the
    gain is non-negative (ties go to the lowest index). With
    ``drop_candidates`` each job's drop rate is snapped to the best candidate
    around the greedy pass.

    A second route rounds every count up and removes the replica whose loss
    is smallest until the plan fits; it recovers plans that single +1 moves
    cannot reach under a fairness term. The better of the two is returned.
    """
    cont = plan.replicas
    d0 = np.clip(plan.drop_rates.copy(), 0.0, 1.0)
    cpu = np.array([j.cpu_per_replica for j in jobs])
    mem = np.array([j.mem_per_replica for j in jobs])

    def fits(xv):
        return cpu @ xv <= limits.max_cpu + 1e-9 and mem @ xv <= limits.max_mem + 1e-9

    def value(xv, dv):
        return objective(AllocationPlan(xv, dv))

    separable = isinstance(objective, ClusterProblem)

    def values_with_one_changed(xv, dv, x_alt):
        """Objective value when job i alone switches to x_alt[i], for every i."""
        if separable:
            base = objective.effective(xv, dv)
            alt = objective.effective(x_alt, dv)
            out = np.empty(len(xv))
            for i in range(len(xv)):
                u = base.copy()
                u[i] = alt[i]
                out[i] = objective.combine(u)
            return out
        out = np.empty(len(xv))
        for i in range(len(xv)):
            xt = xv.copy()
            xt[i] = x_alt[i]
            out[i] = value(xt, dv)
        return out

    def snap_drops(xv, dv):
        if drop_candidates is None:
            return dv
        dv = dv.copy()
        # a shared rate first: single-job moves alone stall under a spread penalty
        best_val = value(xv, dv)
        for cand in drop_candidates:
            shared = np.full(len(dv), float(cand))
            val = value(xv, shared)
            if val > best_val + 1e-12:
                best_val, dv = val, shared
        for i in range(len(dv)):
            best_val, best_d = -math.inf, dv[i]
            for cand in drop_candidates:
                trial = dv.copy()
                trial[i] = cand
                val = value(xv, trial)
                if val > best_val + 1e-12:
                    best_val, best_d = val, cand
            dv[i] = best_d
        return dv

    def transfer(xv, dv):
        """Move single replicas between jobs while that strictly improves the objective."""
        for _ in range(int(xv.sum())):
            current = value(xv, dv)
            lowered = values_with_one_changed(xv, dv, np.maximum(xv - 1, 1.0))
            best = (1e-9, None, None)
            for i in range(len(xv)):
                if xv[i] <= 1 or lowered[i] < current - 1.0:
                    continue
                base = xv.copy()
                base[i] -= 1
                raised = values_with_one_changed(base, dv, base + 1)
                for j in range(len(xv)):
                    trial = base.copy()
                    trial[j] += 1
                    if j == i or not fits(trial):
                        continue
                    gain = raised[j] - current
                    if gain > best[0]:
                        best = (gain, i, j)
            if best[1] is None:
                break
            xv = xv.copy()
            xv[best[1]] -= 1
            xv[best[2]] += 1
        return xv

    def fill(xv, dv):
        xv = xv.copy()
        dv = snap_drops(xv, dv)
        for _ in range(len(xv) + 1):
            before = xv.copy()
            while True:
                current = value(xv, dv)
                candidates = values_with_one_changed(xv, dv, xv + 1)
                best_gain, best_i = -math.inf, None
                for i in range(len(xv)):
                    trial = xv.copy()
                    trial[i] += 1
                    if not fits(trial):
                        continue
                    gain = (candidates[i] - current) / cpu[i]
                    if gain > best_gain + 1e-12:
                        best_gain, best_i = gain, i
                if best_i is None or best_gain < -1e-12:
                    break
                xv[best_i] += 1
            xv = transfer(xv, dv)
            d_new = snap_drops(xv, dv)
            if np.array_equal(xv, before) and np.array_equal(d_new, dv):
                break
            dv = d_new
        return xv, dv

    # floor route
    x = np.maximum(1.0, np.floor(cont + 1e-9))
    frac = cont - np.floor(cont + 1e-9)
    order = sorted(range(len(x)), key=lambda i: (-frac[i], i))
    while not fits(x):
        movable = [i for i in order if x[i] > 1]
        if not movable:
            raise ValueError("infeasible: minimum allocation exceeds resource limits")
        for i in movable:
            x[i] -= 1
            if fits(x):
                break
    best_x, best_d = fill(x, d0)
    best_val = value(best_x, best_d)

    # ceil route
    x = np.maximum(1.0, np.ceil(cont - 1e-9))
    while not fits(x):
        lowered = values_with_one_changed(x, d0, np.maximum(x - 1, 1.0))
        movable = [i for i in range(len(x)) if x[i] > 1]
        i = max(movable, key=lambda i: (lowered[i], -i))
        x[i] -= 1
    x, d = fill(x, d0)
    if value(x, d) > best_val + 1e-12:
        best_x, best_d = x, d
    return AllocationPlan(best_x, best_d)
