"""Comparison policies: static fair share, two reactive heuristics, one proactive per-job rule."""
from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autoscaler import AutoscalerConfig, ViolationTracker, fits, replica_capacity
from .objectives import AllocationPlan, JobSpec, ResourceLimits
from .predictor import Predictor, RateHistory, create_predictor
from .simulator import ClusterSnapshot, Decision

_LOGGER = logging.getLogger(__name__)


def baseline_fair_share(jobs: Sequence[JobSpec], limits: ResourceLimits) -> AllocationPlan:
    cap = replica_capacity(jobs, limits)
    if cap < len(jobs):
        raise ValueError(f"infeasible fair share: {cap} replicas for {len(jobs)} jobs")
    return AllocationPlan(np.full(len(jobs), float(cap // len(jobs))))


def clip_in_id_order(demands: Sequence[int], jobs: Sequence[JobSpec],
                     limits: ResourceLimits) -> List[int]:
    """Grant demands in ascending job-id order; later jobs get the remainder (floor 1)."""
    out = [1] * len(jobs)
    for i in sorted(range(len(jobs)), key=lambda i: jobs[i].id):
        want = max(1, int(demands[i]))
        while want > 1:
            trial = out.copy()
            trial[i] = want
            if fits(trial, jobs, limits):
                break
            want -= 1
        out[i] = want
    return out


def headroom_for(i: int, targets: Sequence[int], jobs: Sequence[JobSpec],
                 limits: ResourceLimits) -> int:
    """Largest count job ``i`` could hold with every other job unchanged."""
    n = int(targets[i])
    while True:
        trial = list(targets)
        trial[i] = n + 1
        if not fits(trial, jobs, limits):
            return n
        n += 1


def oneshot_target(replicas: int, latency: float, slo: float) -> int:
    """Replica count proportional to latency/SLO (at least 1)."""
    if latency <= 0:
        return 1
    if math.isinf(latency):
        return math.inf
    return max(1, math.ceil(replicas * latency / slo - 1e-9))


class FairSharePolicy:
    name = "fairshare"

    def initial_replicas(self, jobs, limits):
        return [int(r) for r in baseline_fair_share(jobs, limits).replicas]

    def on_tick(self, snapshot):
        return None


class _ReactiveBase:
    def __init__(self, jobs: Sequence[JobSpec], config: AutoscalerConfig = AutoscalerConfig()):
        self.jobs = list(jobs)
        self.config = config
        self.tracker = ViolationTracker(len(self.jobs))
        self.starvation_events = 0

    def initial_replicas(self, jobs, limits):
        return [int(r) for r in baseline_fair_share(jobs, limits).replicas]


class OneshotPolicy(_ReactiveBase):
    """Jumps straight to ceil(x * latency / SLO) on sustained over- or under-load."""

    name = "oneshot"

    def on_tick(self, snapshot: ClusterSnapshot) -> Optional[Decision]:
        cfg = self.config
        self.tracker.update(snapshot.jobs, cfg.short_period)
        targets = [o.ready + o.pending for o in snapshot.jobs]
        changed = False
        # event order: jobs are served in ascending id order within a tick
        for i in sorted(range(len(self.jobs)), key=lambda i: self.jobs[i].id):
            o = snapshot.jobs[i]
            slo = self.jobs[i].slo.target_latency
            if self.tracker.over[i] + 1e-9 >= cfg.upscale_trigger_duration:
                want = oneshot_target(targets[i], o.window_latency, slo)
                room = headroom_for(i, targets, self.jobs, snapshot.limits)
                if room <= targets[i]:
                    self.starvation_events += 1
                new = min(want, room)
                if new > targets[i]:
                    targets[i] = int(new)
                    changed = True
                self.tracker.reset(i)
            elif self.tracker.under[i] + 1e-9 >= cfg.downscale_trigger_duration:
                new = min(targets[i], oneshot_target(targets[i], o.window_latency, slo))
                if new < targets[i]:
                    targets[i] = int(new)
                    changed = True
                self.tracker.reset(i)
        return Decision(targets) if changed else None


class AiadPolicy(_ReactiveBase):
    """+1 after sustained violation, -1 after sustained satisfaction."""

    name = "aiad"

    def on_tick(self, snapshot: ClusterSnapshot) -> Optional[Decision]:
        cfg = self.config
        self.tracker.update(snapshot.jobs, cfg.short_period)
        targets = [o.ready + o.pending for o in snapshot.jobs]
        changed = False
        for i in sorted(range(len(self.jobs)), key=lambda i: self.jobs[i].id):
            if self.tracker.over[i] + 1e-9 >= cfg.upscale_trigger_duration:
                trial = list(targets)
                trial[i] += 1
                if fits(trial, self.jobs, snapshot.limits):
                    targets = trial
                    changed = True
                else:
                    self.starvation_events += 1
                self.tracker.reset(i)
            elif self.tracker.under[i] + 1e-9 >= cfg.downscale_trigger_duration:
                if targets[i] > 1:
                    targets[i] -= 1
                    changed = True
                self.tracker.reset(i)
        return Decision(targets) if changed else None


def mark_replicas(peak_rate: float, service_time: float) -> int:
    """Replicas needed when each serves 1/p requests per second at most."""
    return max(1, math.ceil(peak_rate * service_time - 1e-9))


class MarkPolicy:
    """Proactive and per-job: size for the forecast mean peak at full replica throughput."""

    name = "mark"

    def __init__(self, jobs: Sequence[JobSpec], config: AutoscalerConfig = AutoscalerConfig(),
                 predictor_factory: Callable[[int], Predictor] = None, interval: float = 60.0):
        self.jobs = list(jobs)
        self.config = config
        self.interval = interval
        factory = predictor_factory or (lambda i: create_predictor("damped-mean"))
        self.predictors = [factory(i) for i in range(len(self.jobs))]

    def initial_replicas(self, jobs, limits):
        return [int(r) for r in baseline_fair_share(jobs, limits).replicas]

    def plan(self, snapshot: ClusterSnapshot) -> List[int]:
        demands = []
        for job, o, pred in zip(self.jobs, snapshot.jobs, self.predictors):
            if hasattr(pred, "position"):
                pred.position = len(o.minute_rates)
            fc = pred.forecast(RateHistory(o.minute_rates, self.interval), self.config.horizon)
            peak = float(fc.mean.max()) / self.interval
            demands.append(mark_replicas(peak, job.service_time))
        return clip_in_id_order(demands, self.jobs, snapshot.limits)

    def on_tick(self, snapshot: ClusterSnapshot) -> Optional[Decision]:
        period_ticks = max(1, int(round(self.config.long_period / self.config.short_period)))
        if snapshot.tick % period_ticks:
            return None
        return Decision(self.plan(snapshot))
