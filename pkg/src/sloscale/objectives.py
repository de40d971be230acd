"""Cluster objective functions over per-job utilities, latency estimates and drop penalties."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numba
import numpy as np

from .latency import MDC, RELAXED_MDC, UPPER_BOUND, RelaxationKnobs, _upper_bound_latency
from .utility import PenaltySchedule, Slo, UtilityParams


class ObjectiveKind(str, Enum):
    SUM = "sum"
    FAIR = "fair"
    FAIR_SUM = "fairsum"
    PENALTY_SUM = "penaltysum"
    PENALTY_FAIR_SUM = "penaltyfairsum"

    @property
    def uses_drops(self) -> bool:
        return self in (ObjectiveKind.PENALTY_SUM, ObjectiveKind.PENALTY_FAIR_SUM)

    @property
    def has_sum(self) -> bool:
        return self is not ObjectiveKind.FAIR

    @property
    def has_fairness(self) -> bool:
        return self in (ObjectiveKind.FAIR, ObjectiveKind.FAIR_SUM,
                        ObjectiveKind.PENALTY_FAIR_SUM)


class Form(str, Enum):
    PRECISE = "precise"
    RELAXED = "relaxed"


@dataclass(frozen=True)
class JobSpec:
    id: str
    service_time: float
    slo: Slo
    priority: float = 1.0
    cpu_per_replica: float = 1.0
    mem_per_replica: float = 1.0

    def __post_init__(self):
        if not self.service_time > 0:
            raise ValueError(f"job {self.id}: service_time must be > 0")
        if self.priority < 0:
            raise ValueError(f"job {self.id}: priority must be >= 0")
        if not (self.cpu_per_replica > 0 and self.mem_per_replica > 0):
            raise ValueError(f"job {self.id}: resource footprints must be > 0")


@dataclass(frozen=True)
class ResourceLimits:
    max_cpu: float
    max_mem: float

    def __post_init__(self):
        if not (self.max_cpu > 0 and self.max_mem > 0):
            raise ValueError("resource limits must be > 0")

    @classmethod
    def for_replicas(cls, replicas: int, cpu_per_replica: float = 1.0,
                     mem_per_replica: float = 1.0) -> "ResourceLimits":
        return cls(replicas * cpu_per_replica, replicas * mem_per_replica)


@dataclass(frozen=True)
class ClusterObjectiveSpec:
    kind: ObjectiveKind = ObjectiveKind.SUM
    gamma: Optional[float] = None  # None -> job count
    penalty: PenaltySchedule = PenaltySchedule()
    utility: UtilityParams = UtilityParams()
    knobs: RelaxationKnobs = RelaxationKnobs()
    form: Form = Form.RELAXED
    latency_model: str = "mdc"  # or "upper-bound"
    load_aggregate: str = "mean"  # or "max": per-step worst sample

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        object.__setattr__(self, "form", Form(self.form))
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.latency_model not in ("mdc", "upper-bound"):
            raise ValueError(f"unknown latency model {self.latency_model!r}")
        if self.load_aggregate not in ("mean", "max"):
            raise ValueError(f"unknown load aggregate {self.load_aggregate!r}")

    def gamma_for(self, n_jobs: int) -> float:
        return float(n_jobs) if self.gamma is None else float(self.gamma)

    def with_form(self, form: Form) -> "ClusterObjectiveSpec":
        return ClusterObjectiveSpec(self.kind, self.gamma, self.penalty, self.utility,
                                    self.knobs, Form(form), self.latency_model,
                                    self.load_aggregate)

    @property
    def relaxed(self) -> bool:
        return self.form is Form.RELAXED

    @property
    def latency_code(self) -> int:
        if self.latency_model == "upper-bound":
            return UPPER_BOUND
        return RELAXED_MDC if self.relaxed else MDC

    @property
    def penalty_schedule(self) -> PenaltySchedule:
        return self.penalty.with_mode(self.relaxed)


@dataclass
class AllocationPlan:
    replicas: np.ndarray
    drop_rates: np.ndarray = None

    def __post_init__(self):
        self.replicas = np.asarray(self.replicas, dtype=float).copy()
        if self.drop_rates is None:
            self.drop_rates = np.zeros_like(self.replicas)
        self.drop_rates = np.asarray(self.drop_rates, dtype=float).copy()
        if self.replicas.shape != self.drop_rates.shape or self.replicas.ndim != 1:
            raise ValueError("replicas and drop_rates must be 1-D arrays of equal length")

    def __len__(self):
        return len(self.replicas)

    def __eq__(self, other):
        if not isinstance(other, AllocationPlan):
            return NotImplemented
        return (np.array_equal(self.replicas, other.replicas)
                and np.array_equal(self.drop_rates, other.drop_rates))

    def copy(self) -> "AllocationPlan":
        return AllocationPlan(self.replicas, self.drop_rates)

    def int_replicas(self) -> list:
        return [int(round(v)) for v in self.replicas]

    def to_dict(self, jobs: Sequence[JobSpec]) -> dict:
        return {j.id: {"replicas": float(x), "drop_rate": float(d)}
                for j, x, d in zip(jobs, self.replicas, self.drop_rates)}


@numba.njit(cache=True)
def _erlang_c_pair(lo, a):
    """Erlang C at ``lo`` and ``lo + 1`` servers from one Erlang B recurrence."""
    if a <= 0.0:
        return 0.0, 0.0
    b = 1.0
    b_lo = 1.0
    for n in range(1, lo + 2):
        b = a * b / (n + a * b)
        if n == lo:
            b_lo = b
    if lo >= 1 and a < lo:
        c_lo = b_lo / (1.0 - (a / lo) * (1.0 - b_lo))
    else:
        c_lo = 1.0
    hi = lo + 1
    if a < hi:
        c_hi = b / (1.0 - (a / hi) * (1.0 - b))
    else:
        c_hi = 1.0
    return c_lo, c_hi


@numba.njit(cache=True)
def _fast_mdc(p, lam, n, k):
    if lam <= 0.0:
        return p
    if p * lam / n >= 1.0:
        return math.inf
    lo = int(math.floor(n))
    frac = n - lo
    c_lo, c_hi = _erlang_c_pair(lo, lam * p)
    cw = c_lo + frac * (c_hi - c_lo)
    if cw <= 1.0 - k:
        return p
    return p + 0.5 * math.log(cw / (1.0 - k)) / (n / p - lam)


@numba.njit(cache=True)
def _fast_latency(model, p, lam, n, k, rho_max):
    if model == UPPER_BOUND:
        return _upper_bound_latency(p, lam, n)
    if model == RELAXED_MDC and p * lam / n > rho_max:
        knee = rho_max * n / p
        return (lam / knee) * _fast_mdc(p, knee, n, k)
    return _fast_mdc(p, lam, n, k)


@numba.njit(cache=True)
def _batch_utilities(x, d, p, s, k, loads, ready, cold_steps, alpha, rho_max,
                     model, relaxed_utility):
    n_jobs, n_samples, n_steps = loads.shape
    out = np.empty(n_jobs)
    for i in range(n_jobs):
        xi = max(x[i], 1.0)
        keep = 1.0 - min(max(d[i], 0.0), 1.0)
        warm = max(min(xi, ready[i]), 1.0)
        total = 0.0
        for t in range(n_steps):
            n = warm if t < cold_steps else xi
            for j in range(n_samples):
                lam = loads[i, j, t] * keep
                lat = _fast_latency(model, p[i], lam, n, k[i], rho_max)
                if lat <= s[i]:
                    total += 1.0
                elif relaxed_utility and lat < math.inf:
                    total += (s[i] / lat) ** alpha
        out[i] = total / (n_samples * n_steps)
    return out


def phi_array(drop_rates: np.ndarray, schedule: PenaltySchedule) -> np.ndarray:
    """Vectorised penalty multiplier."""
    d = np.clip(np.asarray(drop_rates, dtype=float), 0.0, 1.0)
    avail = 1.0 - d
    edges = schedule.availabilities
    credits = schedule.credits
    if schedule.relaxed:
        # np.interp wants increasing x
        xs = np.concatenate((edges[::-1], [1.0 + 1e-9]))
        ys = np.concatenate((credits[::-1], [credits[0]]))
        credit = np.interp(avail, xs, ys)
        credit = np.where(avail >= edges[0] - 1e-12, 0.0, credit)
    else:
        credit = np.ones_like(avail)
        for a, c in zip(edges[::-1], credits[::-1]):
            credit = np.where(avail >= a - 1e-12, c, credit)
        credit = np.where(avail >= edges[0] - 1e-12, 0.0, credit)
    return 1.0 - credit


def _as_load_cube(loads: Sequence, aggregate: str) -> np.ndarray:
    cubes = []
    for arr in loads:
        a = np.asarray(arr, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(1, -1)
        if aggregate == "max":
            a = a.max(axis=0, keepdims=True)
        cubes.append(a)
    shapes = {c.shape for c in cubes}
    if len(shapes) != 1:
        # pad ragged inputs by repeating the last column / row
        n_s = max(c.shape[0] for c in cubes)
        n_w = max(c.shape[1] for c in cubes)
        cubes = [np.pad(c, ((0, n_s - c.shape[0]), (0, n_w - c.shape[1])), mode="edge")
                 for c in cubes]
    return np.ascontiguousarray(np.stack(cubes))


class ClusterProblem:
    """Vectorised evaluator of one cluster objective over a fixed load snapshot.

    ``loads`` holds one array per job of arrival rates in requests/second,
    shaped (samples, steps). During the first ``cold_steps`` steps a job can
    use at most its ``ready`` replicas.
    """

    def __init__(self, jobs: Sequence[JobSpec], loads: Sequence, spec: ClusterObjectiveSpec,
                 limits: Optional[ResourceLimits] = None, ready: Optional[Sequence[float]] = None,
                 cold_steps: int = 0, min_replicas: Optional[Sequence[float]] = None):
        if len(loads) != len(jobs):
            raise ValueError(f"{len(jobs)} jobs but {len(loads)} load arrays")
        self.jobs = list(jobs)
        self.spec = spec
        self.limits = limits
        self.loads = _as_load_cube(loads, spec.load_aggregate)
        n = len(jobs)
        self.p = np.array([j.service_time for j in jobs], dtype=float)
        self.s = np.array([j.slo.target_latency for j in jobs], dtype=float)
        self.k = np.array([min(j.slo.percentile_k, 1 - 1e-9) for j in jobs], dtype=float)
        self.priority = np.array([j.priority for j in jobs], dtype=float)
        self.cpu = np.array([j.cpu_per_replica for j in jobs], dtype=float)
        self.mem = np.array([j.mem_per_replica for j in jobs], dtype=float)
        self.ready = (np.full(n, np.inf) if ready is None
                      else np.maximum(np.asarray(ready, dtype=float), 1.0))
        self.cold_steps = int(cold_steps) if ready is not None else 0
        self.min_replicas = (np.ones(n) if min_replicas is None
                             else np.asarray(min_replicas, dtype=float))
        self.gamma = spec.gamma_for(n)
        self._schedule = spec.penalty_schedule
        self.n_evals = 0

    def __len__(self):
        return len(self.jobs)

    def utilities(self, replicas, drop_rates=None, apply_drops=None) -> np.ndarray:
        """Predicted utility of non-dropped requests per job.

        Drop rates thin the admitted load only for Penalty* kinds unless
        ``apply_drops`` says otherwise.
        """
        x = np.asarray(replicas, dtype=float)
        if x.shape != (len(self.jobs),):
            raise ValueError(f"expected {len(self.jobs)} replica counts, got shape {x.shape}")
        if apply_drops is None:
            apply_drops = self.spec.kind.uses_drops
        d = (np.zeros_like(x) if drop_rates is None or not apply_drops
             else np.asarray(drop_rates, dtype=float))
        self.n_evals += 1
        return _batch_utilities(x, d, self.p, self.s, self.k, self.loads, self.ready,
                                self.cold_steps, float(self.spec.utility.alpha),
                                float(self.spec.knobs.rho_max), self.spec.latency_code,
                                self.spec.relaxed)

    def effective(self, replicas, drop_rates=None) -> np.ndarray:
        u = self.utilities(replicas, drop_rates)
        if self.spec.kind.uses_drops and drop_rates is not None:
            u = u * phi_array(drop_rates, self._schedule)
        return u

    def combine(self, u: np.ndarray) -> float:
        return cluster_value_from_utilities(u, self.spec, self.priority, self.gamma)

    def value(self, replicas, drop_rates=None) -> float:
        return self.combine(self.effective(replicas, drop_rates))

    def __call__(self, plan: AllocationPlan) -> float:
        return self.value(plan.replicas, plan.drop_rates)

    def residuals(self, replicas, drop_rates=None) -> np.ndarray:
        x = np.asarray(replicas, dtype=float)
        d = np.zeros_like(x) if drop_rates is None else np.asarray(drop_rates, dtype=float)
        res = [x - self.min_replicas, d, 1.0 - d]
        if self.limits is not None:
            res.insert(0, np.array([self.limits.max_cpu - float(self.cpu @ x),
                                    self.limits.max_mem - float(self.mem @ x)]))
        return np.concatenate(res)


def job_predicted_utility(job: JobSpec, replicas: float, drop_rate: float, loads,
                          spec: ClusterObjectiveSpec) -> float:
    """Mean utility over load samples for one job (loads in requests/second)."""
    arr = np.asarray(loads, dtype=float)
    if arr.size == 0:
        raise ValueError("loads must be non-empty")
    problem = ClusterProblem([job], [arr], spec)
    return float(problem.utilities([float(replicas)], [drop_rate], apply_drops=True)[0])


def cluster_objective(plan: AllocationPlan, jobs: Sequence[JobSpec], loads: Sequence,
                      spec: ClusterObjectiveSpec) -> float:
    if len(plan) != len(jobs):
        raise ValueError(f"plan has {len(plan)} entries for {len(jobs)} jobs")
    return ClusterProblem(jobs, loads, spec)(plan)


def cluster_value_from_utilities(utilities: Sequence[float], spec: ClusterObjectiveSpec,
                                 priorities: Optional[Sequence[float]] = None,
                                 gamma: Optional[float] = None) -> float:
    """Fold per-job (effective) utilities into the selected cluster objective.

    Fair kinds are expressed as maximisation: Fair returns -(max - min).
    """
    u = np.asarray(utilities, dtype=float)
    pri = np.ones_like(u) if priorities is None else np.asarray(priorities, dtype=float)
    kind = spec.kind
    value = 0.0
    if kind.has_sum:
        value += float(pri @ u)
    if kind.has_fairness:
        spread = float(u.max() - u.min())
        if kind is ObjectiveKind.FAIR:
            value -= spread
        else:
            value -= (spec.gamma_for(len(u)) if gamma is None else gamma) * spread
    return value


def constraint_residuals(plan: AllocationPlan, jobs: Sequence[JobSpec],
                         limits: ResourceLimits) -> list:
    """Residuals that are all >= 0 exactly when the plan is feasible."""
    x = plan.replicas
    d = plan.drop_rates
    cpu = sum(j.cpu_per_replica * xi for j, xi in zip(jobs, x))
    mem = sum(j.mem_per_replica * xi for j, xi in zip(jobs, x))
    return ([limits.max_cpu - cpu, limits.max_mem - mem]
            + [xi - 1.0 for xi in x] + [di for di in d] + [1.0 - di for di in d])


def is_feasible(plan: AllocationPlan, jobs: Sequence[JobSpec], limits: ResourceLimits,
                tol: float = 1e-9) -> bool:
    return min(constraint_residuals(plan, jobs, limits)) >= -tol
