import pytest

from sloscale.autoscaler import AutoscalerConfig
from sloscale.baselines import (AiadPolicy, FairSharePolicy, MarkPolicy, OneshotPolicy,
                                baseline_fair_share, clip_in_id_order, mark_replicas,
                                oneshot_target)
from sloscale.objectives import JobSpec, ResourceLimits
from sloscale.predictor import OraclePredictor
from sloscale.simulator import ClusterSnapshot, JobObservation
from sloscale.utility import Slo


def jobs_of(n, p=0.15, slo=0.6):
    return [JobSpec(f"j{i:02d}", p, Slo(slo)) for i in range(n)]


def tick(jobs, replicas, latencies, limits, t=1, rates=None):
    obs = [JobObservation(j.id, r, 0, (), 0.0, lat, 10, lat > j.slo.target_latency,
                          tuple(rates[i]) if rates else ())
           for i, (j, r, lat) in enumerate(zip(jobs, replicas, latencies))]
    return ClusterSnapshot(t * 10.0, obs, limits, t)


def test_fair_share_examples():
    assert baseline_fair_share(jobs_of(10), ResourceLimits.for_replicas(32)).replicas.tolist() \
        == [3.0] * 10
    assert baseline_fair_share(jobs_of(36), ResourceLimits.for_replicas(36)).replicas.tolist() \
        == [1.0] * 36
    assert baseline_fair_share(jobs_of(10), ResourceLimits.for_replicas(16)).replicas.tolist() \
        == [1.0] * 10
    with pytest.raises(ValueError, match="infeasible fair share"):
        baseline_fair_share(jobs_of(10), ResourceLimits.for_replicas(9))
    assert FairSharePolicy().on_tick(None) is None


def test_oneshot_ratio():
    assert oneshot_target(4, 1.2, 0.6) == 8
    assert oneshot_target(4, 0.6, 0.6) == 4
    assert oneshot_target(4, 0.0, 0.6) == 1


def test_oneshot_scales_after_trigger_and_first_come_wins():
    jobs = jobs_of(2)
    limits = ResourceLimits.for_replicas(12)
    policy = OneshotPolicy(jobs)
    decisions = [policy.on_tick(tick(jobs, [4, 4], [1.2, 1.2], limits, t)) for t in range(3)]
    assert decisions[:2] == [None, None]
    # both ask for 8; j00 goes first and takes its 8, j01 gets the remaining 4 (no change)
    assert decisions[2].replicas == [8, 4]
    assert policy.starvation_events == 1


def test_oneshot_no_upscale_within_slo():
    jobs = jobs_of(1)
    policy = OneshotPolicy(jobs)
    limits = ResourceLimits.for_replicas(8)
    for t in range(10):
        assert policy.on_tick(tick(jobs, [4], [0.5], limits, t)) is None


def test_aiad_steps():
    jobs = jobs_of(1)
    limits = ResourceLimits.for_replicas(20)
    policy = AiadPolicy(jobs)
    ups = [policy.on_tick(tick(jobs, [3], [1.0], limits, t)) for t in range(6)]
    # +1 exactly once per 30 s trigger window (three 10 s ticks)
    assert [d.replicas if d else None for d in ups] == [None, None, [4], None, None, [4]]

    flapping = AiadPolicy(jobs)
    for t in range(20):
        lat = 1.0 if t % 2 else 0.1
        assert flapping.on_tick(tick(jobs, [3], [lat], limits, t)) is None

    idle = AiadPolicy(jobs)
    replicas, downs = 3, []
    for t in range(120):
        d = idle.on_tick(tick(jobs, [replicas], [0.0], limits, t))
        if d:
            replicas = d.replicas[0]
            downs.append(t)
    assert replicas == 1
    # one step per five minutes (30 ticks)
    assert downs == [29, 59]


def test_aiad_starves_without_headroom():
    jobs = jobs_of(2)
    limits = ResourceLimits.for_replicas(4)
    policy = AiadPolicy(jobs)
    for t in range(3):
        d = policy.on_tick(tick(jobs, [2, 2], [1.0, 0.1], limits, t))
    assert d is None and policy.starvation_events == 1


def test_mark_examples():
    assert mark_replicas(40.0, 0.15) == 6
    assert mark_replicas(0.0, 0.15) == 1
    jobs = jobs_of(3)
    limits = ResourceLimits.for_replicas(10)
    assert clip_in_id_order([6, 5, 4], jobs, limits) == [6, 3, 1]
    assert clip_in_id_order([2, 2, 2], jobs, limits) == [2, 2, 2]


def test_mark_policy_uses_forecast_peak():
    jobs = jobs_of(2)
    truth = [[2400.0] * 10 + [3000.0] * 10, [0.0] * 20]  # per minute
    policy = MarkPolicy(jobs, AutoscalerConfig(),
                        predictor_factory=lambda i: OraclePredictor(truth[i]))
    limits = ResourceLimits.for_replicas(20)
    snap = tick(jobs, [3, 3], [0.0, 0.0], limits, t=0, rates=[truth[0][:8], truth[1][:8]])
    d = policy.on_tick(snap)
    # peak 3000/min = 50/s within the next 7 minutes, times 0.15 s
    assert d.replicas == [8, 1]
    assert policy.on_tick(tick(jobs, [8, 1], [0.0, 0.0], limits, t=1)) is None
