"""Scenario configuration (JSON) and the policy/workload factories it drives.

Schema (all keys optional unless noted)::

    {
      "name": "so-32",
      "policy": "faro-fairsum",                      # required
      "cluster": {"replicas": 32} | {"max_cpu": 32, "max_mem": 32},
      "jobs": [{"id": "job0", "model": "resnet34", "service_time": 0.18,
                "slo": 0.72, "percentile": 0.99, "priority": 1,
                "cpu": 1, "mem": 1,
                "trace": {"path": "t.csv", "format": "minute-count"}}],
      "workload": {"kind": "synthetic", "jobs": 10, "days": 3, "seed": 4,
                   "window": 4, "lo": 1, "hi": 1600,
                   "service_time": 0.18, "slo": 0.72},
      "eval_minutes": 360,
      "predictor": {"kind": "damped-mean", "window": 15, "damping": 0.8},
      "ablation": {"relaxation": true, "mdc_model": true, "prediction": true,
                   "probabilistic": true, "hybrid": true, "shrink": true},
      "objective": {"gamma": null, "alpha": 4, "rho_max": 0.95, "load_aggregate": "mean"},
      "autoscaler": {... AutoscalerConfig fields ...},
      "solver": {... SolverConfig fields ...},
      "sim": {"tail_drop_threshold": 50, "cold_start_delay": 60,
              "measurement_interval": 60, "tick_interval": 10},
      "seed": 0, "trials": 5
    }

Either ``jobs`` with per-job traces or ``workload`` must be given. Trace
files hold per-minute counts; the last ``eval_minutes`` (after window
averaging) are simulated and everything before is forecasting history.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autoscaler import AblationFlags, AutoscalerConfig, FaroPolicy
from .baselines import AiadPolicy, FairSharePolicy, MarkPolicy, OneshotPolicy
from .latency import RelaxationKnobs
from .objectives import ClusterObjectiveSpec, JobSpec, ObjectiveKind, ResourceLimits
from .predictor import create_predictor
from .simulator import SimConfig
from .solver import SolverConfig
from .traces import MINUTES_PER_DAY, RateSeries, load_trace, rescale, window_average
from .utility import Slo, UtilityParams

POLICIES = ("fairshare", "oneshot", "aiad", "mark", "faro-sum", "faro-fair", "faro-fairsum",
            "faro-penaltysum", "faro-penaltyfairsum")
FARO_KINDS = {
    "faro-sum": ObjectiveKind.SUM,
    "faro-fair": ObjectiveKind.FAIR,
    "faro-fairsum": ObjectiveKind.FAIR_SUM,
    "faro-penaltysum": ObjectiveKind.PENALTY_SUM,
    "faro-penaltyfairsum": ObjectiveKind.PENALTY_FAIR_SUM,
}


class ConfigError(ValueError):
    pass


def _build(cls, data: Optional[dict], where: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class JobEntry:
    id: str
    service_time: float = 0.18
    slo: float = 0.72
    percentile: float = 0.99
    priority: float = 1.0
    cpu: float = 1.0
    mem: float = 1.0
    model: str = ""
    trace: Optional[dict] = None

    def spec(self) -> JobSpec:
        return JobSpec(self.id, self.service_time, Slo(self.slo, self.percentile),
                       self.priority, self.cpu, self.mem)


@dataclass(frozen=True)
class WorkloadConfig:
    kind: str = "synthetic"
    jobs: int = 10
    days: int = 3
    seed: int = 4
    window: int = 4
    lo: float = 1.0
    hi: float = 1600.0
    service_time: float = 0.18
    slo: float = 0.72


@dataclass(frozen=True)
class ObjectiveConfig:
    gamma: Optional[float] = None
    alpha: float = 4.0
    rho_max: float = 0.95
    load_aggregate: str = "mean"


@dataclass(frozen=True)
class SimSettings:
    tail_drop_threshold: int = 50
    cold_start_delay: float = 60.0
    measurement_interval: float = 60.0
    tick_interval: float = 10.0


@dataclass(frozen=True)
class ScenarioConfig:
    policy: str
    name: str = "scenario"
    cluster: dict = field(default_factory=lambda: {"replicas": 32})
    jobs: Tuple[JobEntry, ...] = ()
    workload: Optional[WorkloadConfig] = None
    eval_minutes: Optional[int] = None
    predictor: dict = field(default_factory=lambda: {"kind": "damped-mean"})
    ablation: AblationFlags = AblationFlags()
    objective: ObjectiveConfig = ObjectiveConfig()
    autoscaler: AutoscalerConfig = AutoscalerConfig()
    solver: SolverConfig = SolverConfig()
    sim: SimSettings = SimSettings()
    seed: int = 0
    trials: int = 1
    base_dir: str = "."

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.jobs and self.workload is None:
            raise ConfigError("scenario needs either 'jobs' with traces or a 'workload'")
        if self.jobs and any(j.trace is None for j in self.jobs):
            raise ConfigError("every job entry needs a 'trace' when no workload is given")
        self.limits()  # validates cluster block

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "ScenarioConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        if "policy" not in data:
            raise ConfigError("scenario needs a 'policy'")
        jobs = tuple(_build(JobEntry, j, f"jobs[{i}]") for i, j in enumerate(data.pop("jobs", [])))
        workload = data.pop("workload", None)
        built = dict(
            jobs=jobs,
            workload=_build(WorkloadConfig, workload, "workload") if workload is not None else None,
            ablation=_build(AblationFlags, data.pop("ablation", None), "ablation"),
            objective=_build(ObjectiveConfig, data.pop("objective", None), "objective"),
            autoscaler=_build(AutoscalerConfig, data.pop("autoscaler", None), "autoscaler"),
            solver=_build(SolverConfig, data.pop("solver", None), "solver"),
            sim=_build(SimSettings, data.pop("sim", None), "sim"),
        )
        data.setdefault("base_dir", base_dir)
        try:
            return cls(**data, **built)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data, base_dir=str(path.parent))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        return out

    def with_overrides(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    # -- derived objects ----------------------------------------------
    def limits(self) -> ResourceLimits:
        c = self.cluster
        try:
            if "replicas" in c:
                extra = set(c) - {"replicas"}
                if extra:
                    raise ConfigError(f"cluster: unexpected keys {sorted(extra)}")
                return ResourceLimits.for_replicas(int(c["replicas"]))
            return ResourceLimits(float(c["max_cpu"]), float(c["max_mem"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cluster: {exc}") from None

    def objective_spec(self) -> ClusterObjectiveSpec:
        o = self.objective
        return ClusterObjectiveSpec(FARO_KINDS.get(self.policy, ObjectiveKind.SUM), o.gamma,
                                    utility=UtilityParams(o.alpha),
                                    knobs=RelaxationKnobs(o.rho_max),
                                    load_aggregate=o.load_aggregate)

    def sim_config(self, duration: float, seed: int) -> SimConfig:
        s = self.sim
        return SimConfig(duration=duration, seed=seed, tail_drop_threshold=s.tail_drop_threshold,
                         cold_start_delay=s.cold_start_delay,
                         measurement_interval=s.measurement_interval,
                         tick_interval=s.tick_interval, limits=self.limits(),
                         alpha=self.objective.alpha)


def synthetic_series(kind: str, days: int, rng: np.random.Generator) -> np.ndarray:
    """Per-minute relative load shapes.

    ``azure``: diurnal cycle with a random phase, amplitude and second
    harmonic, Poisson-timed bursts of job-specific frequency and size, and
    log-normal noise, so jobs differ in mean-to-peak ratio after rescaling.
    ``twitter``: smoother diurnal cycle with light noise.
    """
    t = np.arange(days * MINUTES_PER_DAY)
    day = 2 * np.pi * t / MINUTES_PER_DAY
    if kind == "azure":
        amp = rng.uniform(0.2, 0.9)
        v = 1 + amp * np.sin(day + rng.uniform(0, 2 * np.pi)) \
            + 0.3 * amp * np.sin(2 * day + rng.uniform(0, 2 * np.pi))
        v = np.maximum(v, 0.05)
        bursts_per_day, size = rng.uniform(1, 12), rng.uniform(0.3, 2.5)
        for start in rng.integers(0, len(t), rng.poisson(days * bursts_per_day)):
            v[start:start + rng.integers(5, 60)] += size * rng.uniform(0.5, 1.0)
        return v * np.exp(rng.uniform(0.08, 0.25) * rng.standard_normal(len(t)))
    if kind == "twitter":
        v = 1 + 0.6 * np.sin(day + rng.uniform(0, 2 * np.pi))
        return v * np.exp(0.08 * rng.standard_normal(len(t)))
    raise ValueError(f"unknown synthetic shape {kind!r}")


def synthetic_workload(w: WorkloadConfig) -> Tuple[List[JobEntry], List[RateSeries]]:
    """``w.jobs - 1`` Azure-like jobs plus one Twitter-like job, window-averaged and
    rescaled onto [lo, hi] requests/minute."""
    if w.kind != "synthetic":
        raise ConfigError(f"unknown workload kind {w.kind!r}")
    rng = np.random.default_rng(w.seed)
    shapes = ["azure"] * max(w.jobs - 1, 0) + ["twitter"]
    shapes = shapes[:w.jobs]
    entries, series = [], []
    for i, kind in enumerate(shapes):
        raw = RateSeries(synthetic_series(kind, w.days, rng), 60.0, f"synthetic:{kind}")
        series.append(rescale(window_average(raw, w.window), w.lo, w.hi))
        entries.append(JobEntry(id=f"job{i}", service_time=w.service_time, slo=w.slo,
                                model=f"{kind}-{i}"))
    return entries, series


def build_workload(cfg: ScenarioConfig) -> Tuple[List[JobSpec], List[RateSeries], List[np.ndarray]]:
    """Jobs, evaluation traces and forecasting histories for a scenario."""
    if cfg.workload is not None:
        entries, full = synthetic_workload(cfg.workload)
        per_day = MINUTES_PER_DAY // cfg.workload.window
    else:
        entries = list(cfg.jobs)
        full = []
        for e in entries:
            t = dict(e.trace)
            path = Path(cfg.base_dir) / t.pop("path")
            series = load_trace(path, t.pop("format", "minute-count"))
            if "window" in t:
                series = window_average(series, int(t.pop("window")))
            if "rescale" in t:
                lo, hi = t.pop("rescale")
                series = rescale(series, lo, hi)
            if t:
                raise ConfigError(f"job {e.id}: unknown trace keys {sorted(t)}")
            full.append(series)
        per_day = None
    length = min(len(s) for s in full)
    n_eval = cfg.eval_minutes or (per_day if per_day else length)
    if n_eval > length:
        raise ConfigError(f"eval_minutes {n_eval} exceeds trace length {length}")
    evals, hists = [], []
    for s in full:
        v = s.values[len(s) - length:]
        hists.append(v[:length - n_eval])
        evals.append(RateSeries(v[length - n_eval:], 60.0, s.origin))
    return [e.spec() for e in entries], evals, hists


def predictor_factory(cfg: ScenarioConfig):
    params = dict(cfg.predictor)
    kind = params.pop("kind", "damped-mean")
    return lambda i: create_predictor(kind, **params)


def make_policy(cfg: ScenarioConfig, jobs: Sequence[JobSpec], seed: int):
    name = cfg.policy
    if name == "fairshare":
        return FairSharePolicy()
    if name == "oneshot":
        return OneshotPolicy(jobs, cfg.autoscaler)
    if name == "aiad":
        return AiadPolicy(jobs, cfg.autoscaler)
    if name == "mark":
        return MarkPolicy(jobs, cfg.autoscaler, predictor_factory(cfg))
    return FaroPolicy(jobs, cfg.objective_spec(), cfg.autoscaler, cfg.solver,
                      predictor_factory(cfg), cfg.ablation, seed=seed, name=name)
