"""Per-job utility functions and the drop-rate penalty multiplier."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np


@dataclass(frozen=True)
class Slo:
    target_latency: float
    percentile_k: float = 0.99

    def __post_init__(self):
        if not self.target_latency > 0:
            raise ValueError(f"target_latency must be > 0, got {self.target_latency}")
        if not 0 < self.percentile_k <= 1:
            raise ValueError(f"percentile_k must be in (0, 1], got {self.percentile_k}")


@dataclass(frozen=True)
class UtilityParams:
    alpha: float = 4.0

    def __post_init__(self):
        if not self.alpha >= 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")


# (availability, credit) band edges of the AWS-style service credit table
DEFAULT_BREAKPOINTS: Tuple[Tuple[float, float], ...] = (
    (0.99, 0.0),
    (0.95, 0.25),
    (0.90, 0.50),
    (0.0, 1.0),
)

_EPS = 1e-12


@dataclass(frozen=True)
class PenaltySchedule:
    """Service-credit bands keyed by availability.

    In step mode an availability ``a`` falls in the first band whose
    availability edge satisfies ``a >= edge``. In relaxed mode credits are
    linearly interpolated between consecutive edges (credit 0 above the
    first edge).
    """

    breakpoints: Tuple[Tuple[float, float], ...] = DEFAULT_BREAKPOINTS
    relaxed: bool = False

    def __post_init__(self):
        bps = tuple((float(a), float(c)) for a, c in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        if not bps:
            raise ValueError("penalty schedule needs at least one breakpoint")
        for (a0, c0), (a1, c1) in zip(bps, bps[1:]):
            if not a1 < a0:
                raise ValueError("breakpoint availabilities must be strictly decreasing")
            if c1 < c0:
                raise ValueError("credits must not decrease as availability decreases")
        for _, c in bps:
            if not 0.0 <= c <= 1.0:
                raise ValueError("credits must lie in [0, 1]")

    def with_mode(self, relaxed: bool) -> "PenaltySchedule":
        return PenaltySchedule(self.breakpoints, relaxed)

    @property
    def availabilities(self) -> np.ndarray:
        return np.array([a for a, _ in self.breakpoints])

    @property
    def credits(self) -> np.ndarray:
        return np.array([c for _, c in self.breakpoints])

    def drop_edges(self) -> List[float]:
        """Largest drop rate inside each band that still earns partial credit."""
        return sorted({round(1.0 - a, 12) for a, c in self.breakpoints if c < 1.0} | {0.0})

    def credit(self, availability: float) -> float:
        bps = self.breakpoints
        if availability >= bps[0][0] - _EPS:
            return 0.0 if not self.relaxed else bps[0][1]
        if not self.relaxed:
            for a, c in bps:
                if availability >= a - _EPS:
                    return c
            return 1.0
        for (a0, c0), (a1, c1) in zip(bps, bps[1:]):
            if availability >= a1:
                frac = (a0 - availability) / (a0 - a1)
                return c0 + frac * (c1 - c0)
        return bps[-1][1]


def utility_original(latency: float, slo: Slo) -> float:
    """Step utility: 1 when the latency meets the target, else 0."""
    return 1.0 if latency <= slo.target_latency else 0.0


def utility_relaxed(latency: float, slo: Slo, params: UtilityParams = UtilityParams()) -> float:
    """Inverse-power utility ``min((s / l) ** alpha, 1)``."""
    if latency <= slo.target_latency:
        return 1.0
    if math.isinf(latency):
        return 0.0
    return min((slo.target_latency / latency) ** params.alpha, 1.0)


def penalty_multiplier(drop_rate: float, schedule: PenaltySchedule = PenaltySchedule()) -> float:
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must be in [0, 1], got {drop_rate}")
    return 1.0 - schedule.credit(1.0 - drop_rate)


def effective_utility(utility_non_dropped: float, drop_rate: float,
                      schedule: PenaltySchedule = PenaltySchedule()) -> float:
    return penalty_multiplier(drop_rate, schedule) * utility_non_dropped
