"""Analytic latency estimates: upper bound, M/M/c waiting tail, M/D/c approximation.

The M/D/c k-th percentile latency is approximated as the deterministic
service time plus half of the M/M/c k-th percentile queue wait. Replica
counts may be continuous (inside the solver); Erlang C is then linearly
interpolated between the neighbouring integer server counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np


class UnstableQueueError(ValueError):
    pass


@dataclass(frozen=True)
class QueueInput:
    service_time: float
    arrival_rate: float
    replicas: float
    percentile: float = 0.99

    def __post_init__(self):
        if not self.service_time > 0:
            raise ValueError("service_time must be > 0")
        if self.arrival_rate < 0:
            raise ValueError("arrival_rate must be >= 0")
        if not self.replicas >= 1:
            raise ValueError("replicas must be >= 1")
        if not 0 < self.percentile < 1:
            raise ValueError("percentile must be in (0, 1)")

    @property
    def utilization(self) -> float:
        return self.service_time * self.arrival_rate / self.replicas


@dataclass(frozen=True)
class RelaxationKnobs:
    rho_max: float = 0.95

    def __post_init__(self):
        if not 0 < self.rho_max < 1:
            raise ValueError("rho_max must be in (0, 1)")


@numba.njit(cache=True)
def _erlang_c_int(c, a):
    # Erlang B recurrence, then C = B / (1 - rho (1 - B)); saturates at 1.
    if a <= 0.0:
        return 0.0
    if a >= c:
        return 1.0
    b = 1.0
    for n in range(1, c + 1):
        b = a * b / (n + a * b)
    rho = a / c
    return b / (1.0 - rho * (1.0 - b))


@numba.njit(cache=True)
def _erlang_c_cont(c, a):
    lo = int(math.floor(c))
    frac = c - lo
    c_lo = _erlang_c_int(lo, a)
    if frac <= 0.0:
        return c_lo
    c_hi = _erlang_c_int(lo + 1, a)
    return c_lo + frac * (c_hi - c_lo)


@numba.njit(cache=True)
def _mmc_wait_quantile(p, lam, n, k):
    if lam <= 0.0:
        return 0.0
    rate = n / p - lam
    if rate <= 0.0:
        return math.inf
    cw = _erlang_c_cont(n, lam * p)
    if cw <= 1.0 - k:
        return 0.0
    return math.log(cw / (1.0 - k)) / rate


@numba.njit(cache=True)
def _mdc_latency(p, lam, n, k):
    if p * lam / n >= 1.0:
        return math.inf
    return p + 0.5 * _mmc_wait_quantile(p, lam, n, k)


@numba.njit(cache=True)
def _relaxed_mdc_latency(p, lam, n, k, rho_max):
    if p * lam / n <= rho_max:
        return _mdc_latency(p, lam, n, k)
    lam_knee = rho_max * n / p
    return (lam / lam_knee) * _mdc_latency(p, lam_knee, n, k)


@numba.njit(cache=True)
def _upper_bound_latency(p, lam, n):
    # kappa = arrivals in one second, all served in parallel by n replicas
    return max(p, p * lam / n)


# latency model codes shared with the batch evaluators
MDC = 0
RELAXED_MDC = 1
UPPER_BOUND = 2


@numba.njit(cache=True)
def _latency(model, p, lam, n, k, rho_max):
    if model == RELAXED_MDC:
        return _relaxed_mdc_latency(p, lam, n, k, rho_max)
    if model == UPPER_BOUND:
        return _upper_bound_latency(p, lam, n)
    return _mdc_latency(p, lam, n, k)


def erlang_c(servers: int, offered_load: float) -> float:
    """Probability that an arriving M/M/c customer waits."""
    if servers < 1:
        raise ValueError("servers must be >= 1")
    if offered_load < 0:
        raise ValueError("offered_load must be >= 0")
    if offered_load >= servers:
        raise UnstableQueueError(
            f"unstable queue: offered load {offered_load} >= {servers} servers")
    return float(_erlang_c_int(int(servers), float(offered_load)))


def mmc_wait_quantile(q: QueueInput) -> float:
    """k-th percentile of M/M/c queue waiting time (0 when C <= 1 - k)."""
    if q.utilization >= 1.0:
        raise UnstableQueueError(f"unstable queue: rho={q.utilization:.4f}")
    return float(_mmc_wait_quantile(q.service_time, q.arrival_rate,
                                    float(q.replicas), q.percentile))


def mdc_latency(q: QueueInput) -> float:
    return float(_mdc_latency(q.service_time, q.arrival_rate,
                              float(q.replicas), q.percentile))


def relaxed_mdc_latency(q: QueueInput, knobs: RelaxationKnobs = RelaxationKnobs()) -> float:
    return float(_relaxed_mdc_latency(q.service_time, q.arrival_rate,
                                      float(q.replicas), q.percentile, knobs.rho_max))


def upper_bound_latency(arrival_rate: float, service_time: float, replicas: float) -> float:
    return float(_upper_bound_latency(service_time, arrival_rate, float(replicas)))


def upper_bound_replicas(arrival_rate: float, service_time: float, slo_latency: float) -> int:
    if arrival_rate < 0 or service_time <= 0 or slo_latency <= 0:
        raise ValueError("need arrival_rate >= 0, service_time > 0, slo_latency > 0")
    return max(1, math.ceil(service_time * arrival_rate / slo_latency - 1e-12))


def min_replicas_mdc(arrival_rate: float, service_time: float, slo_latency: float,
                     percentile: float = 0.99, limit: int = 100_000) -> int:
    """Smallest integer replica count whose M/D/c latency meets the target."""
    n = max(1, math.floor(service_time * arrival_rate) + 1)
    while n <= limit:
        if _mdc_latency(service_time, arrival_rate, float(n), percentile) <= slo_latency:
            return n
        n += 1
    raise ValueError("no replica count within limit meets the latency target")


def latency_array(model: int, p: np.ndarray, lam: np.ndarray, n: np.ndarray,
                  k: float, rho_max: float = 0.95) -> np.ndarray:
    """Elementwise latency estimate over broadcast arrays."""
    p, lam, n = np.broadcast_arrays(np.asarray(p, float), np.asarray(lam, float),
                                    np.asarray(n, float))
    return _latency_vec(model, p.ravel(), lam.ravel(), n.ravel(), k, rho_max).reshape(p.shape)


@numba.njit(cache=True)
def _latency_vec(model, p, lam, n, k, rho_max):
    out = np.empty(p.shape[0])
    for i in range(p.shape[0]):
        out[i] = _latency(model, p[i], lam[i], n[i], k, rho_max)
    return out
