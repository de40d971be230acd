import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sloscale.autoscaler import (AblationFlags, AutoscalerConfig, FaroPolicy, ViolationTracker,
                                 fits, forecast_loads, plan_long_term, replica_capacity, shrink,
                                 short_term_react)
from sloscale.latency import min_replicas_mdc
from sloscale.objectives import (AllocationPlan, ClusterObjectiveSpec, ClusterProblem, Form,
                                 JobSpec, ObjectiveKind, ResourceLimits, job_predicted_utility)
from sloscale.predictor import OraclePredictor, create_predictor
from sloscale.simulator import ClusterSnapshot, JobObservation, SimConfig, run_scenario
from sloscale.traces import RateSeries
from sloscale.utility import Slo

SUM = ClusterObjectiveSpec(ObjectiveKind.SUM)


def observation(job_id, ready, rates=(), violating=False, latency=0.0):
    return JobObservation(job_id, ready, 0, (), 0.0, latency, 0, violating, tuple(rates))


def snapshot(jobs, ready, rates=None, limits=None, tick=0):
    rates = rates or [()] * len(jobs)
    obs = [observation(j.id, r, h) for j, r, h in zip(jobs, ready, rates)]
    return ClusterSnapshot(0.0, obs, limits or ResourceLimits.for_replicas(32), tick)


def minimal_full_utility(job, load, spec=SUM):
    """Scan oracle: fewest replicas with predicted utility 1."""
    return next(x for x in range(1, 200)
                if job_predicted_utility(job, x, 0.0, load, spec) == 1.0)


def test_shrink_to_scan_minimum():
    job = JobSpec("a", 0.15, Slo(0.6, 0.99))
    load = [np.full((1, 3), 32.0)]
    target = minimal_full_utility(job, load[0])
    assert target == 6
    out = shrink(AllocationPlan([10.0]), [job], load, SUM)
    assert out.replicas.tolist() == [6.0]


def test_shrink_leaves_unsatisfied_and_floor_jobs():
    jobs = [JobSpec("a", 0.15, Slo(0.3)), JobSpec("b", 0.15, Slo(0.3))]
    heavy = [np.full((1, 2), 100.0)] * 2
    plan = AllocationPlan([4.0, 5.0])
    assert shrink(plan, jobs, heavy, SUM) == plan
    idle = [np.zeros((1, 2))] * 2
    assert shrink(AllocationPlan([1.0, 1.0]), jobs, idle, SUM).replicas.tolist() == [1.0, 1.0]


def random_state(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    jobs = [JobSpec(f"j{i}", rng.uniform(0.05, 0.3), Slo(rng.uniform(0.4, 1.2)))
            for i in range(n)]
    loads = [np.maximum(rng.uniform(0.2, 3.0) / j.service_time
                        * (1 + 0.2 * rng.standard_normal((8, 3))), 0) for j in jobs]
    kind = list(ObjectiveKind)[int(rng.integers(0, 5))]
    plan = AllocationPlan(rng.integers(1, 25, n).astype(float),
                          rng.choice([0.0, 0.01, 0.05], n) if kind.uses_drops else None)
    return jobs, loads, ClusterObjectiveSpec(kind), plan


@given(st.integers(0, 100_000))
def test_shrink_is_idempotent_and_minimal(seed):
    jobs, loads, spec, plan = random_state(seed)
    problem = ClusterProblem(jobs, loads, spec)
    once = shrink(plan, jobs, loads, spec)
    assert shrink(once, jobs, loads, spec) == once
    assert problem(once) == pytest.approx(problem(plan), abs=1e-6)
    u = problem.utilities(once.replicas, once.drop_rates)
    for i in range(len(jobs)):
        if u[i] >= 1.0 - 1e-9 and once.replicas[i] > 1:
            lower = once.replicas.copy()
            lower[i] -= 1
            assert abs(problem.value(lower, once.drop_rates) - problem(once)) > 1e-9


def test_plan_idle_jobs_shrink_to_one():
    jobs = [JobSpec(f"j{i}", 0.18, Slo(0.72)) for i in range(4)]
    state = snapshot(jobs, [3, 3, 3, 3])
    result = plan_long_term(state, jobs, ResourceLimits.for_replicas(12), SUM,
                            loads=[np.zeros((10, 7))] * 4)
    assert result.ok
    assert result.plan.replicas.tolist() == [1.0] * 4


def test_plan_at_exact_capacity_matches_minimal_counts():
    jobs = [JobSpec("a", 0.1, Slo(0.4)), JobSpec("b", 0.2, Slo(0.6)),
            JobSpec("c", 0.15, Slo(0.5))]
    loads = [np.full((1, 7), 30.0), np.full((1, 7), 22.0), np.full((1, 7), 41.0)]
    minimal = [minimal_full_utility(j, l) for j, l in zip(jobs, loads)]
    capacity = sum(minimal)
    precise = ClusterProblem(jobs, loads, SUM.with_form(Form.PRECISE))
    # enumeration oracle: the only allocation reaching full utility within the capacity
    best = max((x for x in itertools.product(range(1, capacity), repeat=3)
                if sum(x) <= capacity), key=lambda x: precise.value(np.array(x, float)))
    assert list(best) == minimal
    cfg = AutoscalerConfig(cold_start_delay=0.0)
    result = plan_long_term(snapshot(jobs, [1, 1, 1]), jobs,
                            ResourceLimits.for_replicas(capacity), SUM, cfg, loads=loads)
    assert result.plan.replicas.tolist() == [float(m) for m in minimal]


def test_plan_covers_sampled_peak():
    job = JobSpec("a", 0.15, Slo(0.6, 0.99))
    history = [600.0] * 20 + [1800.0] * 10  # requests per minute, stepping up
    cfg = AutoscalerConfig(cold_start_delay=0.0)
    result = plan_long_term(snapshot([job], [2], [history]), [job],
                            ResourceLimits.for_replicas(60), SUM, cfg,
                            predictors=[create_predictor("damped-mean")], seed=4)
    peak = float(np.max(result.loads[0]))
    assert result.plan.replicas[0] >= min_replicas_mdc(peak, 0.15, 0.6, 0.99)


def test_plan_failure_keeps_current_allocation():
    jobs = [JobSpec("a", 0.1, Slo(0.5)), JobSpec("b", 0.1, Slo(0.5))]
    state = snapshot(jobs, [2, 3])
    # one load array for two jobs makes the objective reject the input
    result = plan_long_term(state, jobs, ResourceLimits.for_replicas(8), SUM,
                            loads=[np.ones((1, 7))])
    assert not result.ok
    assert result.plan.replicas.tolist() == [2.0, 3.0]


def test_short_term_examples():
    jobs = [JobSpec("a", 0.1, Slo(0.5)), JobSpec("b", 0.1, Slo(0.5))]
    limits = ResourceLimits.for_replicas(6)
    assert short_term_react([2, 2], [0.0, 20.0], jobs, limits) == ([0, 0], [])
    assert short_term_react([2, 2], [35.0, 0.0], jobs, limits) == ([1, 0], [])
    assert short_term_react([3, 3], [35.0, 40.0], jobs, limits) == ([0, 0], [0, 1])
    # the lower id takes the last free replica
    assert short_term_react([3, 2], [35.0, 35.0], jobs, limits) == ([1, 0], [1])


def test_violation_tracker():
    t = ViolationTracker(2)
    obs = [observation("a", 1, violating=True), observation("b", 1)]
    for _ in range(3):
        t.update(obs, 10.0)
    assert t.over.tolist() == [30.0, 0.0] and t.under.tolist() == [0.0, 30.0]
    t.reset(0)
    assert t.over[0] == 0.0


def test_forecast_loads_shapes_and_flags():
    cfg = AutoscalerConfig()
    hist = [[60.0 * (1 + i % 3) for i in range(30)]]
    pred = [create_predictor("damped-mean")]
    full = forecast_loads(hist, cfg, pred, seed=1)
    assert full[0].shape == (100, 7)
    mean_only = forecast_loads(hist, cfg, pred, 1, AblationFlags(probabilistic=False))
    assert mean_only[0].shape == (1, 7)
    naive = forecast_loads(hist, cfg, pred, 1, AblationFlags(prediction=False))
    assert np.all(naive[0] == hist[0][-1] / 60.0)


def test_capacity_helpers():
    jobs = [JobSpec("a", 0.1, Slo(0.5), cpu_per_replica=2.0), JobSpec("b", 0.1, Slo(0.5))]
    limits = ResourceLimits(10.0, 100.0)
    assert replica_capacity(jobs, limits) == 5
    assert fits([4, 2], jobs, limits) and not fits([5, 1], jobs, limits)


def test_faro_policy_runs_deterministically():
    jobs = [JobSpec(f"j{i}", 0.18, Slo(0.72)) for i in range(3)]
    traces = [RateSeries(np.r_[np.full(10, 200.0), np.full(10, 900.0)]) for _ in jobs]
    cfg = SimConfig(duration=1200.0, seed=2, limits=ResourceLimits.for_replicas(12))
    hist = [[200.0] * 30] * 3
    reports = [run_scenario(traces, jobs, FaroPolicy(jobs, SUM, seed=2), cfg, hist)
               for _ in range(2)]
    assert reports[0].digest() == reports[1].digest()
    assert reports[0].solver_failures == 0
    assert reports[0].minute_replicas[:, -1].sum() <= 12
    # the load step is absorbed by scaling up
    assert reports[0].minute_replicas[:, -1].sum() > reports[0].minute_replicas[:, 5].sum()


def test_config_validation():
    with pytest.raises(ValueError):
        AutoscalerConfig(long_period=60.0, cold_start_delay=60.0)
    with pytest.raises(ValueError):
        AutoscalerConfig(short_period=400.0)
    assert AutoscalerConfig().cold_steps == 1


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_oracle_plan_meets_every_step(seed):
    rng = np.random.default_rng(seed)
    jobs = [JobSpec(f"j{i}", rng.uniform(0.05, 0.25), Slo(rng.uniform(0.4, 1.0)))
            for i in range(3)]
    truths = [rng.uniform(60, 1600, 40) for _ in jobs]  # per minute
    history = [tuple(t[:30]) for t in truths]
    predictors = []
    for t in truths:
        p = OraclePredictor(t)
        p.position = 30
        predictors.append(p)
    state = snapshot(jobs, [1, 1, 1], history, ResourceLimits.for_replicas(200))
    cfg = AutoscalerConfig(cold_start_delay=0.0)
    result = plan_long_term(state, jobs, ResourceLimits.for_replicas(200), SUM, cfg,
                            predictors=predictors)
    for j, (job, truth) in enumerate(zip(jobs, truths)):
        for rate in truth[30:37]:
            u = job_predicted_utility(job, result.plan.replicas[j], 0.0, [rate / 60.0], SUM)
            assert u == 1.0
