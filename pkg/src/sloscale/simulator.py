"""Trace-driven discrete-event simulation of per-job routers and replica pools.

Each job has one router with a shared FIFO queue (tail drop at a length
threshold) feeding its ready replicas. Replicas pull the queue head as soon
as they are free; a new replica only starts pulling after the cold-start
delay. The per-job event loop is a numba kernel advanced in chunks between
autoscaler ticks, so a policy sees exactly the state at the tick instant.

Tie order at equal timestamps: service completion, then arrival, then tick.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numba
import numpy as np

from .objectives import JobSpec, ResourceLimits
from .traces import RateSeries
from .utility import PenaltySchedule, UtilityParams, penalty_multiplier, utility_relaxed

_LOGGER = logging.getLogger(__name__)

# request status codes
PENDING, SERVED, TAIL_DROP, EXPLICIT_DROP = 0, 1, 2, 3
# integer state slots of a router
_NEXT, _QHEAD, _QLEN = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    duration: float
    seed: int = 0
    tail_drop_threshold: int = 50
    cold_start_delay: float = 60.0
    measurement_interval: float = 60.0
    tick_interval: float = 10.0
    limits: Optional[ResourceLimits] = None
    exponential_service: bool = False
    percentile: float = 0.99
    alpha: float = 4.0

    def __post_init__(self):
        if self.tail_drop_threshold < 1:
            raise ValueError("tail_drop_threshold must be >= 1")
        for name in ("measurement_interval", "tick_interval"):
            step = getattr(self, name)
            if step <= 0 or abs(self.duration / step - round(self.duration / step)) > 1e-9:
                raise ValueError(f"{name} must divide duration")
        if self.cold_start_delay < 0:
            raise ValueError("cold_start_delay must be >= 0")


def generate_arrivals(series: RateSeries, seed) -> np.ndarray:
    """Poisson count per interval, arrival instants uniform within the interval."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = rng.poisson(series.values)
    starts = np.repeat(np.arange(len(series.values)) * series.interval, counts)
    times = starts + rng.random(counts.sum()) * series.interval
    # sorting within each interval keeps the per-interval counts exact
    return np.sort(times, kind="stable")


@numba.njit(cache=True)
def _earliest_server(active, ready_at, free_at):
    best = -1
    best_t = math.inf
    for j in range(active.shape[0]):
        if active[j]:
            t = max(ready_at[j], free_at[j])
            if t < best_t:
                best_t = t
                best = j
    return best, best_t


@numba.njit(cache=True)
def _dispatch_until(t_limit, arr_t, svc, lat, resolved_at, status, queue, state,
                    active, ready_at, free_at):
    cap = queue.shape[0]
    while state[_QLEN] > 0:
        j, avail = _earliest_server(active, ready_at, free_at)
        if j < 0 or avail > t_limit:
            return
        i = queue[state[_QHEAD]]
        start = max(avail, arr_t[i])
        free_at[j] = start + svc[i]
        lat[i] = start + svc[i] - arr_t[i]
        resolved_at[i] = start
        status[i] = SERVED
        state[_QHEAD] = (state[_QHEAD] + 1) % cap
        state[_QLEN] -= 1


@numba.njit(cache=True)
def _advance(t_end, drop_rate, arr_t, arr_u, svc, lat, resolved_at, status, queue, state,
             active, ready_at, free_at):
    """Process every arrival with timestamp <= t_end, then dispatch up to t_end."""
    cap = queue.shape[0]
    n = arr_t.shape[0]
    i = state[_NEXT]
    while i < n and arr_t[i] <= t_end:
        a = arr_t[i]
        _dispatch_until(a, arr_t, svc, lat, resolved_at, status, queue, state,
                        active, ready_at, free_at)
        if arr_u[i] < drop_rate:
            status[i] = EXPLICIT_DROP
            lat[i] = math.inf
            resolved_at[i] = a
        elif state[_QLEN] >= cap:
            status[i] = TAIL_DROP
            lat[i] = math.inf
            resolved_at[i] = a
        else:
            queue[(state[_QHEAD] + state[_QLEN]) % cap] = i
            state[_QLEN] += 1
            _dispatch_until(a, arr_t, svc, lat, resolved_at, status, queue, state,
                            active, ready_at, free_at)
        i += 1
        state[_NEXT] = i
    _dispatch_until(t_end, arr_t, svc, lat, resolved_at, status, queue, state,
                    active, ready_at, free_at)


class JobRouter:
    """Router queue plus replica pool of one job.

    The replica pool holds active slots (ready or pending) and drained slots
    that may still finish an in-service request. Downscaling removes pending
    replicas first, then idle ones, then busy ones (which drain).
    """

    def __init__(self, job: JobSpec, arrivals: np.ndarray, config: SimConfig,
                 max_replicas: int, rng: np.random.Generator):
        self.job = job
        self.config = config
        n = len(arrivals)
        self.arr_t = np.ascontiguousarray(arrivals, dtype=np.float64)
        self.arr_u = rng.random(n)
        if config.exponential_service:
            self.svc = rng.exponential(job.service_time, n)
        else:
            self.svc = np.full(n, float(job.service_time))
        self.lat = np.full(n, np.nan)
        self.resolved_at = np.full(n, np.nan)
        self.status = np.zeros(n, dtype=np.int8)
        self.queue = np.zeros(config.tail_drop_threshold, dtype=np.int64)
        self.state = np.zeros(3, dtype=np.int64)
        slots = max(4, min(2 * max_replicas + 2, 16))  # grows on demand
        self.active = np.zeros(slots, dtype=np.bool_)
        self.ready_at = np.zeros(slots)
        self.free_at = np.zeros(slots)
        self.drop_rate = 0.0
        self.now = 0.0

    # -- replica pool -------------------------------------------------
    @property
    def target(self) -> int:
        return int(self.active.sum())

    def ready_count(self, now: Optional[float] = None) -> int:
        now = self.now if now is None else now
        return int(np.count_nonzero(self.active & (self.ready_at <= now)))

    def pending_count(self, now: Optional[float] = None) -> int:
        return self.target - self.ready_count(now)

    def pending_ready_times(self) -> np.ndarray:
        return np.sort(self.ready_at[self.active & (self.ready_at > self.now)])

    def set_initial(self, replicas: int):
        """Replicas that are warm at time 0."""
        while len(self.active) < replicas:
            self._grow()
        self.active[:] = False
        self.active[:replicas] = True
        self.ready_at[:] = 0.0

    def scale_to(self, replicas: int, now: float, delay: Optional[float] = None):
        delay = self.config.cold_start_delay if delay is None else delay
        replicas = max(int(replicas), 0)
        current = self.target
        if replicas > current:
            for _ in range(replicas - current):
                free_slots = np.flatnonzero(~self.active)
                if len(free_slots) == 0:
                    self._grow()
                    free_slots = np.flatnonzero(~self.active)
                j = free_slots[np.argmin(self.free_at[free_slots])]
                self.active[j] = True
                self.ready_at[j] = now + delay
                self.free_at[j] = min(self.free_at[j], now)
        elif replicas < current:
            for _ in range(current - replicas):
                self.active[self._removal_victim(now)] = False

    def _removal_victim(self, now: float) -> int:
        idx = np.flatnonzero(self.active)
        pending = idx[self.ready_at[idx] > now]
        if len(pending):
            return int(pending[np.argmax(self.ready_at[pending])])
        idle = idx[self.free_at[idx] <= now]
        if len(idle):
            return int(idle[-1])
        return int(idx[np.argmin(self.free_at[idx])])

    def _grow(self):
        extra = len(self.active)
        self.active = np.concatenate((self.active, np.zeros(extra, dtype=np.bool_)))
        self.ready_at = np.concatenate((self.ready_at, np.zeros(extra)))
        self.free_at = np.concatenate((self.free_at, np.zeros(extra)))

    # -- event processing ---------------------------------------------
    def advance(self, t_end: float):
        if t_end < self.now:
            raise ValueError("time must be monotone")
        _advance(float(t_end), float(self.drop_rate), self.arr_t, self.arr_u, self.svc,
                 self.lat, self.resolved_at, self.status, self.queue, self.state,
                 self.active, self.ready_at, self.free_at)
        self.now = t_end

    @property
    def queue_length(self) -> int:
        return int(self.state[_QLEN])

    def oldest_queued_age(self) -> float:
        if self.state[_QLEN] == 0:
            return 0.0
        return self.now - self.arr_t[self.queue[self.state[_QHEAD]]]

    def counts(self) -> Dict[str, int]:
        arrived = int(self.state[_NEXT])
        st = self.status[:arrived]
        return {
            "arrivals": arrived,
            "served": int(np.count_nonzero(st == SERVED)),
            "tail_drops": int(np.count_nonzero(st == TAIL_DROP)),
            "explicit_drops": int(np.count_nonzero(st == EXPLICIT_DROP)),
            "in_flight": int(np.count_nonzero(st == PENDING)),
        }


def empirical_quantile(values: np.ndarray, q: float) -> float:
    """Smallest x with empirical CDF >= q; infinities sort last."""
    n = len(values)
    if n == 0:
        return math.nan
    k = min(max(math.ceil(q * n - 1e-9), 1), n) - 1
    return float(np.partition(values, k)[k])


@dataclass
class JobObservation:
    """What a router reports to the autoscaler at a tick."""
    job_id: str
    ready: int
    pending: int
    pending_ready_times: tuple
    drop_rate: float
    window_latency: float          # percentile latency over the last tick window
    window_requests: int
    violating: bool                # window latency above the SLO
    minute_rates: tuple            # completed measurement intervals, requests/interval


@dataclass
class ClusterSnapshot:
    now: float
    jobs: List[JobObservation]
    limits: ResourceLimits
    tick: int


@dataclass
class Decision:
    replicas: Optional[Sequence[int]] = None
    drop_rates: Optional[Sequence[float]] = None


class Policy(Protocol):
    name: str

    def initial_replicas(self, jobs: Sequence[JobSpec], limits: ResourceLimits) -> List[int]:
        ...

    def on_tick(self, snapshot: ClusterSnapshot) -> Optional[Decision]:
        ...


@dataclass
class MetricsReport:
    policy: str
    config: dict
    job_ids: List[str]
    minute_p99: np.ndarray          # (jobs, minutes); inf when drops reach the percentile
    minute_utility: np.ndarray
    minute_effective_utility: np.ndarray
    minute_satisfaction: np.ndarray  # fraction of requests within SLO (1 when idle)
    minute_requests: np.ndarray
    minute_replicas: np.ndarray
    minute_drop_rate: np.ndarray
    violation_rate: np.ndarray      # per job, over the run
    counts: List[Dict[str, int]]
    solver_failures: int = 0
    starvation_events: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def cluster_violation_rate(self) -> float:
        return float(np.mean(self.violation_rate)) if len(self.violation_rate) else 0.0

    @property
    def lost_utility_series(self) -> np.ndarray:
        """Per-minute lost cluster utility (max minus achieved effective utility)."""
        return len(self.job_ids) - self.minute_effective_utility.sum(axis=0)

    @property
    def mean_lost_utility(self) -> float:
        s = self.lost_utility_series
        return float(s.mean()) if len(s) else 0.0

    @property
    def mean_cluster_utility(self) -> float:
        s = self.minute_effective_utility.sum(axis=0)
        return float(s.mean()) if len(s) else 0.0

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "mean_lost_utility": self.mean_lost_utility,
            "mean_cluster_utility": self.mean_cluster_utility,
            "cluster_violation_rate": self.cluster_violation_rate,
            "job_violation_rate": {j: float(v) for j, v in zip(self.job_ids, self.violation_rate)},
            "job_mean_lost_utility": {
                j: float(1.0 - u.mean()) if len(u) else 0.0
                for j, u in zip(self.job_ids, self.minute_effective_utility)},
            "counts": dict(zip(self.job_ids, self.counts)),
            "solver_failures": self.solver_failures,
            "starvation_events": self.starvation_events,
        }

    def to_json(self) -> str:
        body = {"config": self.config, "summary": self.summary(), "extra": self.extra}
        return json.dumps(_jsonable(body), sort_keys=True, indent=2)

    def job_csv_rows(self, j: int) -> List[list]:
        rows = [["minute", "requests", "replicas", "drop_rate", "p99", "satisfaction",
                 "utility", "effective_utility"]]
        for m in range(self.minute_p99.shape[1]):
            rows.append([m, int(self.minute_requests[j, m]), int(self.minute_replicas[j, m]),
                         repr(float(self.minute_drop_rate[j, m])),
                         repr(float(self.minute_p99[j, m])),
                         repr(float(self.minute_satisfaction[j, m])),
                         repr(float(self.minute_utility[j, m])),
                         repr(float(self.minute_effective_utility[j, m]))])
        return rows

    def digest(self) -> str:
        h = hashlib.sha256(self.to_json().encode())
        for j in range(len(self.job_ids)):
            for row in self.job_csv_rows(j):
                h.update(",".join(map(str, row)).encode())
        return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    return obj


def _window_latency(router: JobRouter, lo: int, t0: float, t1: float, q: float):
    """Percentile latency of requests resolved in (t0, t1], plus the new scan start."""
    hi = int(router.state[_NEXT])
    res = router.resolved_at[lo:hi]
    mask = (res > t0) & (res <= t1)
    lats = router.lat[lo:hi][mask]
    # advance past the prefix that is fully resolved
    unresolved = np.flatnonzero(np.isnan(res))
    new_lo = lo + (int(unresolved[0]) if len(unresolved) else hi - lo)
    return lats, new_lo


class Simulation:
    """Couples per-job routers with a policy's tick-driven decisions."""

    def __init__(self, traces: Sequence[RateSeries], jobs: Sequence[JobSpec],
                 policy: Policy, config: SimConfig,
                 histories: Optional[Sequence[Sequence[float]]] = None):
        if len(traces) != len(jobs):
            raise ValueError(f"trace/job mismatch: {len(traces)} traces for {len(jobs)} jobs")
        self.jobs = list(jobs)
        self.policy = policy
        self.config = config
        self.limits = config.limits or ResourceLimits(math.inf, math.inf)
        self.interval = config.measurement_interval
        self.n_minutes = int(round(config.duration / self.interval))
        seeds = np.random.SeedSequence(config.seed).spawn(len(jobs))
        max_rep = self._max_replicas()
        self.routers = []
        self.rates = []
        for job, trace, ss in zip(self.jobs, traces, seeds):
            rng = np.random.default_rng(ss)
            arrivals = generate_arrivals(trace, rng)
            arrivals = arrivals[arrivals < config.duration]
            self.routers.append(JobRouter(job, arrivals, config, max_rep, rng))
            per_minute = np.bincount((arrivals // self.interval).astype(np.int64),
                                     minlength=self.n_minutes)[:self.n_minutes]
            self.rates.append(per_minute.astype(float))
        self.histories = [list(h) for h in histories] if histories else [[] for _ in jobs]
        self.minute_replicas = np.zeros((len(jobs), self.n_minutes))
        self.minute_drop = np.zeros((len(jobs), self.n_minutes))
        self._scan_lo = [0] * len(jobs)
        self.starvation_events = 0

    def _max_replicas(self) -> int:
        lim = self.limits
        caps = []
        for job in self.jobs:
            c = min(lim.max_cpu / job.cpu_per_replica, lim.max_mem / job.mem_per_replica)
            caps.append(c)
        best = max(caps) if caps else 1
        return int(best) if math.isfinite(best) else 64

    def _usage(self, replicas) -> tuple:
        cpu = sum(r * j.cpu_per_replica for r, j in zip(replicas, self.jobs))
        mem = sum(r * j.mem_per_replica for r, j in zip(replicas, self.jobs))
        return cpu, mem

    def _clip_to_capacity(self, replicas: List[int]) -> List[int]:
        """Ascending job-id truncation of a request that exceeds the cluster."""
        cpu, mem = self._usage(replicas)
        if cpu <= self.limits.max_cpu + 1e-9 and mem <= self.limits.max_mem + 1e-9:
            return replicas
        _LOGGER.warning("policy %s requested %s beyond capacity; clipping",
                        getattr(self.policy, "name", "?"), replicas)
        order = sorted(range(len(self.jobs)), key=lambda i: self.jobs[i].id)
        out = [1] * len(self.jobs)
        for i in order:
            out_i = replicas[i]
            while out_i > 1:
                trial = out.copy()
                trial[i] = out_i
                c, m = self._usage(trial)
                if c <= self.limits.max_cpu + 1e-9 and m <= self.limits.max_mem + 1e-9:
                    break
                out_i -= 1
            out[i] = out_i
        return out

    def snapshot(self, now: float, tick: int, window: float) -> ClusterSnapshot:
        obs = []
        minute = int(now // self.interval)
        for i, (job, router) in enumerate(zip(self.jobs, self.routers)):
            lats, self._scan_lo[i] = _window_latency(router, self._scan_lo[i], now - window,
                                                     now, self.config.percentile)
            age = router.oldest_queued_age()
            if len(lats):
                wl = empirical_quantile(lats, self.config.percentile)
            else:
                wl = 0.0
            # a request stuck in the queue already has at least this latency
            if router.queue_length:
                wl = max(wl, age + job.service_time)
            obs.append(JobObservation(
                job_id=job.id, ready=router.ready_count(now), pending=router.pending_count(now),
                pending_ready_times=tuple(router.pending_ready_times()),
                drop_rate=router.drop_rate, window_latency=wl, window_requests=len(lats),
                violating=bool(wl > job.slo.target_latency),
                minute_rates=tuple(self.histories[i]) + tuple(self.rates[i][:minute])))
        return ClusterSnapshot(now=now, jobs=obs, limits=self.limits, tick=tick)

    def apply(self, decision: Optional[Decision], now: float):
        if decision is None:
            return
        if decision.replicas is not None:
            target = [max(1, int(r)) for r in decision.replicas]
            target = self._clip_to_capacity(target)
            for router, r in zip(self.routers, target):
                router.scale_to(r, now)
        if decision.drop_rates is not None:
            for router, d in zip(self.routers, decision.drop_rates):
                router.drop_rate = float(min(max(d, 0.0), 1.0))

    def run(self) -> MetricsReport:
        cfg = self.config
        init = self.policy.initial_replicas(self.jobs, self.limits)
        init = self._clip_to_capacity([max(1, int(r)) for r in init])
        for router, r in zip(self.routers, init):
            router.set_initial(r)
        n_ticks = int(round(cfg.duration / cfg.tick_interval))
        for tick in range(n_ticks + 1):
            now = tick * cfg.tick_interval
            for router in self.routers:
                router.advance(now)
            if tick == n_ticks:
                break
            minute = int(now // self.interval)
            decision = self.policy.on_tick(self.snapshot(now, tick, cfg.tick_interval))
            self.apply(decision, now)
            if abs(now - minute * self.interval) < 1e-9:
                for i, router in enumerate(self.routers):
                    self.minute_replicas[i, minute] = router.target
                    self.minute_drop[i, minute] = router.drop_rate
        return self.report()

    def report(self) -> MetricsReport:
        cfg = self.config
        n, m = len(self.jobs), self.n_minutes
        p99 = np.zeros((n, m))
        util = np.ones((n, m))
        eff = np.ones((n, m))
        sat = np.ones((n, m))
        reqs = np.zeros((n, m))
        viol = np.zeros(n)
        params = UtilityParams(cfg.alpha)
        schedule = PenaltySchedule()
        for i, (job, router) in enumerate(zip(self.jobs, self.routers)):
            done = router.status != PENDING
            minute = (router.arr_t // self.interval).astype(np.int64)
            lat = router.lat
            slo = job.slo.target_latency
            resolved = lat[done]
            viol[i] = (np.count_nonzero(resolved > slo) / len(resolved)) if len(resolved) else 0.0
            order = np.argsort(minute[done], kind="stable")
            mins = minute[done][order]
            lats = resolved[order]
            explicit = (router.status[done] == EXPLICIT_DROP)[order]
            bounds = np.searchsorted(mins, np.arange(m + 1))
            for t in range(m):
                a, b = bounds[t], bounds[t + 1]
                reqs[i, t] = b - a
                if b == a:
                    continue
                chunk = lats[a:b]
                p99[i, t] = empirical_quantile(chunk, cfg.percentile)
                sat[i, t] = np.count_nonzero(chunk <= slo) / (b - a)
                util[i, t] = utility_relaxed(p99[i, t], job.slo, params)
                kept = chunk[~explicit[a:b]]
                u_kept = utility_relaxed(empirical_quantile(kept, cfg.percentile), job.slo,
                                         params) if len(kept) else 1.0
                eff[i, t] = penalty_multiplier(self.minute_drop[i, t], schedule) * u_kept
        return MetricsReport(
            policy=getattr(self.policy, "name", type(self.policy).__name__),
            config=_jsonable(asdict(cfg)), job_ids=[j.id for j in self.jobs],
            minute_p99=p99, minute_utility=util, minute_effective_utility=eff,
            minute_satisfaction=sat, minute_requests=reqs, minute_replicas=self.minute_replicas,
            minute_drop_rate=self.minute_drop, violation_rate=viol,
            counts=[r.counts() for r in self.routers],
            solver_failures=int(getattr(self.policy, "solver_failures", 0)),
            starvation_events=int(getattr(self.policy, "starvation_events", 0)))


def run_scenario(traces: Sequence[RateSeries], jobs: Sequence[JobSpec], policy: Policy,
                 config: SimConfig, histories=None) -> MetricsReport:
    return Simulation(traces, jobs, policy, config, histories).run()


class StaticPolicy:
    """Fixed replica counts; used for validation runs and tests."""

    def __init__(self, replicas: Sequence[int], drop_rates: Optional[Sequence[float]] = None,
                 name: str = "static"):
        self.replicas = list(replicas)
        self.drop_rates = drop_rates
        self.name = name

    def initial_replicas(self, jobs, limits):
        return self.replicas

    def on_tick(self, snapshot):
        if snapshot.tick == 0 and self.drop_rates is not None:
            return Decision(drop_rates=self.drop_rates)
        return None


def reference_latencies(arrivals: Sequence[float], service: Sequence[float], servers: int,
                        threshold: int, drop_u: Optional[Sequence[float]] = None,
                        drop_rate: float = 0.0) -> List[float]:
    """Plain-Python FIFO multi-server queue with tail drop; fixed warm servers.

    Event-by-event reference for the kernel (inf marks a drop).
    """
    import heapq
    free = [0.0] * servers
    heapq.heapify(free)
    waiting: List[int] = []
    out = [math.nan] * len(arrivals)

    def dispatch(limit):
        while waiting and free[0] <= limit:
            i = waiting.pop(0)
            start = max(heapq.heappop(free), arrivals[i])
            heapq.heappush(free, start + service[i])
            out[i] = start + service[i] - arrivals[i]

    for i, a in enumerate(arrivals):
        dispatch(a)
        if drop_u is not None and drop_u[i] < drop_rate:
            out[i] = math.inf
            continue
        if len(waiting) >= threshold:
            out[i] = math.inf
            continue
        waiting.append(i)
        dispatch(a)
    dispatch(math.inf)
    return out
