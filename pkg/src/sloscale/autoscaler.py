"""Hybrid autoscaler: periodic predictive planning plus additive reactive upscaling.

Every long period the planner forecasts each job's arrival rate, samples
load trajectories, solves the relaxed multi-tenant problem, integerizes the
result and shrinks over-provisioned jobs. Between plans the reactive path
adds one replica to any job whose observed latency has stayed above its SLO
for the trigger duration; it never scales down.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .objectives import (AllocationPlan, ClusterObjectiveSpec, ClusterProblem, Form, JobSpec,
                         ResourceLimits)
from .predictor import (Predictor, RateHistory, create_predictor, sample_trajectories)
from .simulator import ClusterSnapshot, Decision, JobObservation
from .solver import SolverConfig, hierarchical_solve, integerize

_LOGGER = logging.getLogger(__name__)

ClusterState = ClusterSnapshot
SHRINK_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AutoscalerConfig:
    long_period: float = 300.0
    short_period: float = 10.0
    horizon: int = 7
    step_length: float = 60.0
    cold_start_delay: float = 60.0
    upscale_trigger_duration: float = 30.0
    downscale_trigger_duration: float = 300.0
    sample_count: int = 100
    short_term_step: int = 1

    def __post_init__(self):
        if not self.long_period > self.cold_start_delay:
            raise ValueError("long_period must exceed cold_start_delay")
        if not 0 < self.short_period < self.long_period:
            raise ValueError("short_period must be in (0, long_period)")
        if self.horizon < 1 or self.sample_count < 1 or self.short_term_step < 1:
            raise ValueError("horizon, sample_count and short_term_step must be >= 1")

    @property
    def cold_steps(self) -> int:
        return int(math.ceil(self.cold_start_delay / self.step_length - 1e-9))


@dataclass(frozen=True)
class AblationFlags:
    """Switches for the planner components; all on is the full system."""
    relaxation: bool = True
    mdc_model: bool = True
    prediction: bool = True
    probabilistic: bool = True
    hybrid: bool = True
    shrink: bool = True


@dataclass
class LongTermResult:
    plan: AllocationPlan
    ok: bool
    message: str = ""
    loads: Optional[List[np.ndarray]] = None


def replica_capacity(jobs: Sequence[JobSpec], limits: ResourceLimits) -> int:
    """Replica count the cluster admits for the heaviest per-replica footprint."""
    cpu = max(j.cpu_per_replica for j in jobs)
    mem = max(j.mem_per_replica for j in jobs)
    return int(math.floor(min(limits.max_cpu / cpu, limits.max_mem / mem) + 1e-9))


def fits(replicas: Sequence[float], jobs: Sequence[JobSpec], limits: ResourceLimits) -> bool:
    cpu = sum(r * j.cpu_per_replica for r, j in zip(replicas, jobs))
    mem = sum(r * j.mem_per_replica for r, j in zip(replicas, jobs))
    return cpu <= limits.max_cpu + 1e-9 and mem <= limits.max_mem + 1e-9


def forecast_loads(histories: Sequence[Sequence[float]], config: AutoscalerConfig,
                   predictors: Sequence[Predictor], seed: int,
                   flags: AblationFlags = AblationFlags(),
                   interval: float = 60.0) -> List[np.ndarray]:
    """Per-job load samples in requests/second, shaped (samples, horizon)."""
    rng = np.random.default_rng(seed)
    out = []
    for hist, pred in zip(histories, predictors):
        if not flags.prediction:
            last = hist[-1] if len(hist) else 0.0
            out.append(np.full((1, config.horizon), last / interval))
            continue
        fc = pred.forecast(RateHistory(tuple(hist), interval), config.horizon)
        if flags.probabilistic:
            samples = sample_trajectories(fc, config.sample_count, rng)
        else:
            samples = fc.mean.reshape(1, -1)
        out.append(samples / interval)
    return out


def shrink(plan: AllocationPlan, jobs: Sequence[JobSpec], loads: Sequence,
           spec: ClusterObjectiveSpec, problem: Optional[ClusterProblem] = None
           ) -> AllocationPlan:
    """Reduce replica counts of utility-1 jobs while the cluster objective is unchanged.

    Jobs are visited in ascending id order; each is decremented until the
    next decrement would change the objective or it reaches one replica.
    """
    problem = problem or ClusterProblem(jobs, loads, spec)
    x = plan.replicas.copy()
    d = plan.drop_rates.copy()
    u = problem.utilities(x, d)
    order = sorted(range(len(jobs)), key=lambda i: jobs[i].id)
    current = problem.value(x, d)
    for i in order:
        if u[i] < 1.0 - SHRINK_TOLERANCE:
            continue
        while x[i] > 1:
            trial = x.copy()
            trial[i] = max(1.0, x[i] - 1)
            value = problem.value(trial, d)
            if abs(value - current) > SHRINK_TOLERANCE:
                break
            x = trial
            current = value
    return AllocationPlan(x, d)


def plan_long_term(state: ClusterState, jobs: Sequence[JobSpec], limits: ResourceLimits,
                   spec: ClusterObjectiveSpec, config: AutoscalerConfig = AutoscalerConfig(),
                   solver_config: SolverConfig = SolverConfig(),
                   predictors: Optional[Sequence[Predictor]] = None,
                   flags: AblationFlags = AblationFlags(), seed: int = 0,
                   loads: Optional[Sequence[np.ndarray]] = None) -> LongTermResult:
    """One predictive planning cycle; on failure the current allocation is kept."""
    current = np.array([o.ready + o.pending for o in state.jobs], dtype=float)
    current_drops = np.array([o.drop_rate for o in state.jobs], dtype=float)
    try:
        if loads is None:
            predictors = predictors or [create_predictor("damped-mean") for _ in jobs]
            loads = forecast_loads([o.minute_rates for o in state.jobs], config,
                                   predictors, seed, flags)
        form = Form.RELAXED if flags.relaxation else Form.PRECISE
        spec = ClusterObjectiveSpec(spec.kind, spec.gamma, spec.penalty, spec.utility,
                                    spec.knobs, form,
                                    "mdc" if flags.mdc_model else "upper-bound",
                                    spec.load_aggregate)
        ready = [float(o.ready) for o in state.jobs]
        cold = config.cold_steps
        result = hierarchical_solve(jobs, loads, limits, spec, solver_config,
                                    ready=ready, cold_steps=cold, initial=current)
        problem = ClusterProblem(jobs, loads, spec, limits, ready=ready, cold_steps=cold)
        edges = spec.penalty.drop_edges() if spec.kind.uses_drops else None
        plan = integerize(result.plan, jobs, limits, problem, drop_candidates=edges)
        if flags.shrink:
            plan = shrink(plan, jobs, loads, spec, problem)
        if not spec.kind.uses_drops:
            plan = AllocationPlan(plan.replicas, np.zeros(len(jobs)))
        if not fits(plan.replicas, jobs, limits):
            raise RuntimeError("integerized plan exceeds resource limits")
        msg = "degraded solve" if result.degraded else ""
        return LongTermResult(plan, True, msg, list(loads))
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        _LOGGER.warning("long-term plan failed, keeping allocation: %s", exc)
        return LongTermResult(AllocationPlan(current, current_drops), False, str(exc))


class ViolationTracker:
    """Continuous over/under-SLO durations per job, fed once per tick."""

    def __init__(self, n_jobs: int):
        self.over = np.zeros(n_jobs)
        self.under = np.zeros(n_jobs)

    def update(self, observations: Sequence[JobObservation], interval: float):
        for i, o in enumerate(observations):
            if o.violating:
                self.over[i] += interval
                self.under[i] = 0.0
            else:
                self.under[i] += interval
                self.over[i] = 0.0

    def reset(self, i: int):
        self.over[i] = 0.0
        self.under[i] = 0.0


def short_term_react(targets: Sequence[int], over_durations: Sequence[float],
                     jobs: Sequence[JobSpec], limits: ResourceLimits,
                     config: AutoscalerConfig = AutoscalerConfig()
                     ) -> Tuple[List[int], List[int]]:
    """Additive upscale deltas and the jobs starved of headroom.

    A job violating its SLO for at least the trigger duration gets
    ``short_term_step`` replicas if the cluster has room; jobs are served in
    ascending id order. Deltas are never negative.
    """
    targets = list(int(t) for t in targets)
    delta = [0] * len(jobs)
    starved = []
    order = sorted(range(len(jobs)), key=lambda i: jobs[i].id)
    for i in order:
        if over_durations[i] + 1e-9 < config.upscale_trigger_duration:
            continue
        step = config.short_term_step
        while step > 0:
            trial = [t + dl for t, dl in zip(targets, delta)]
            trial[i] += step
            if fits(trial, jobs, limits):
                break
            step -= 1
        if step == 0:
            starved.append(i)
        else:
            delta[i] += step
    return delta, starved


class FaroPolicy:
    """Hybrid predictive/reactive autoscaler over one cluster objective."""

    def __init__(self, jobs: Sequence[JobSpec], spec: ClusterObjectiveSpec,
                 config: AutoscalerConfig = AutoscalerConfig(),
                 solver_config: SolverConfig = SolverConfig(),
                 predictor_factory: Callable[[int], Predictor] = None,
                 flags: AblationFlags = AblationFlags(), seed: int = 0, name: str = None):
        self.jobs = list(jobs)
        self.spec = spec
        self.config = config
        self.solver_config = solver_config
        self.flags = flags
        self.seed = seed
        self.name = name or f"faro-{spec.kind.value}"
        factory = predictor_factory or (lambda i: create_predictor("damped-mean"))
        self.predictors = [factory(i) for i in range(len(self.jobs))]
        self.tracker = ViolationTracker(len(self.jobs))
        self.solver_failures = 0
        self.starvation_events = 0
        self.cycles = 0
        self.targets: List[int] = []

    def initial_replicas(self, jobs, limits):
        share = max(1, replica_capacity(jobs, limits) // len(jobs))
        self.targets = [share] * len(jobs)
        return list(self.targets)

    def on_tick(self, snapshot: ClusterSnapshot) -> Optional[Decision]:
        cfg = self.config
        self.tracker.update(snapshot.jobs, cfg.short_period)
        self.targets = [o.ready + o.pending for o in snapshot.jobs]
        period_ticks = max(1, int(round(cfg.long_period / cfg.short_period)))
        if snapshot.tick % period_ticks == 0:
            solver_cfg = replace(self.solver_config, seed=self.seed * 100_003 + self.cycles)
            for p in self.predictors:
                if hasattr(p, "position"):
                    p.position = len(snapshot.jobs[0].minute_rates)
            result = plan_long_term(snapshot, self.jobs, snapshot.limits, self.spec, cfg,
                                    solver_cfg, self.predictors, self.flags,
                                    seed=self.seed * 7919 + self.cycles)
            self.cycles += 1
            if not result.ok:
                self.solver_failures += 1
                return None
            self.targets = [int(round(r)) for r in result.plan.replicas]
            return Decision(self.targets, list(result.plan.drop_rates))
        if not self.flags.hybrid:
            return None
        delta, starved = short_term_react(self.targets, self.tracker.over, self.jobs,
                                          snapshot.limits, cfg)
        self.starvation_events += len(starved)
        if not any(delta):
            return None
        for i, dl in enumerate(delta):
            if dl:
                self.tracker.reset(i)
        self.targets = [t + dl for t, dl in zip(self.targets, delta)]
        return Decision(self.targets)
