"""Probabilistic arrival-rate predictors.

Every predictor turns a per-interval rate history into per-step Gaussian
parameters; ``sample_trajectories`` draws the non-negative sample paths the
autoscaler's objective averages over.
"""
from __future__ import annotations

import csv
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class RateHistory:
    rates: tuple
    interval: float = 60.0

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        if any(r < 0 for r in rates):
            raise ValueError("rates must be non-negative")
        if not self.interval > 0:
            raise ValueError("interval must be > 0")
        object.__setattr__(self, "rates", rates)

    def __len__(self):
        return len(self.rates)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.rates, dtype=float)


@dataclass(frozen=True)
class ProbabilisticForecast:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.maximum(np.asarray(self.mean, dtype=float), 0.0)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if np.any(std < 0):
            raise ValueError("std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def horizon(self) -> int:
        return len(self.mean)


def sample_trajectories(forecast: ProbabilisticForecast, count: int = 100,
                        seed: Union[int, np.random.Generator, None] = 0) -> np.ndarray:
    """Draw ``count`` x horizon rate paths from the per-step Gaussians, clamped at 0."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = rng.standard_normal((count, forecast.horizon))
    return np.maximum(forecast.mean + draws * forecast.std, 0.0)


class Predictor(ABC):
    """Per-job forecaster. ``min_history`` is the shortest usable history."""

    min_history: int = 1

    def forecast(self, history: RateHistory, horizon: int) -> ProbabilisticForecast:
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if len(history) < self.min_history:
            return LastValuePredictor().forecast(history, horizon)
        return self._forecast(history.as_array(), horizon)

    @abstractmethod
    def _forecast(self, rates: np.ndarray, horizon: int) -> ProbabilisticForecast:
        ...


class LastValuePredictor(Predictor):
    """Repeats the last observation; std is the sample std of the whole history."""

    min_history = 0

    def _forecast(self, rates, horizon):
        last = rates[-1] if len(rates) else 0.0
        std = float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0
        return ProbabilisticForecast(np.full(horizon, last), np.full(horizon, std))


class DampedMeanPredictor(Predictor):
    """Exponentially weighted mean of the trailing window with Gaussian residual spread.

    The per-step std is the weighted residual std of the window, widened by
    ``sqrt(1 + h / window)`` at step ``h`` to reflect growing uncertainty.
    """

    min_history = 2

    def __init__(self, window: int = 15, damping: float = 0.8):
        if not 0 < damping <= 1:
            raise ValueError("damping must be in (0, 1]")
        self.window = window
        self.damping = damping

    def _forecast(self, rates, horizon):
        tail = rates[-self.window:]
        weights = self.damping ** np.arange(len(tail))[::-1]
        weights = weights / weights.sum()
        mean = float(weights @ tail)
        std = float(np.std(tail, ddof=1))
        steps = np.arange(1, horizon + 1)
        return ProbabilisticForecast(np.full(horizon, mean),
                                     std * np.sqrt(1.0 + steps / len(tail)))


class SeasonalNaivePredictor(Predictor):
    """Repeats the last full period; std from the differences against the previous period."""

    def __init__(self, period: int):
        if period < 1:
            raise ValueError("period must be >= 1")
        self.period = period
        self.min_history = period

    def _forecast(self, rates, horizon):
        last = rates[-self.period:]
        mean = np.resize(last, horizon)
        if len(rates) >= 2 * self.period:
            resid = rates[-self.period:] - rates[-2 * self.period:-self.period]
            std = float(np.std(resid, ddof=1)) if self.period > 1 else float(abs(resid[0]))
        else:
            std = 0.0
        return ProbabilisticForecast(mean, np.full(horizon, std))


class OraclePredictor(Predictor):
    """Reads the attached ground truth; optional multiplicative noise.

    ``position`` counts how many truth values precede the forecast window and
    is advanced by the caller (normally to the history length).
    """

    min_history = 0

    def __init__(self, truth: Sequence[float], noise: float = 0.0, seed: int = 0):
        self.truth = np.asarray(truth, dtype=float)
        self.noise = noise
        self._rng = np.random.default_rng(seed)
        self.position: Optional[int] = None

    def forecast(self, history: RateHistory, horizon: int) -> ProbabilisticForecast:
        start = len(history) if self.position is None else self.position
        window = self.truth[start:start + horizon]
        if len(window) < horizon:
            fill = window[-1] if len(window) else (self.truth[-1] if len(self.truth) else 0.0)
            window = np.concatenate((window, np.full(horizon - len(window), fill)))
        mean = window.copy()
        if self.noise > 0:
            mean = mean * (1.0 + self.noise * self._rng.standard_normal(horizon))
        return ProbabilisticForecast(mean, np.zeros(horizon))

    def _forecast(self, rates, horizon):  # pragma: no cover - forecast is overridden
        raise NotImplementedError


FORECAST_HEADER = ["job_id", "step", "mean", "std"]


def load_forecast_file(path: Union[str, Path]) -> Dict[str, ProbabilisticForecast]:
    """Parse a ``job_id,step,mean,std`` CSV into one forecast per job."""
    rows: Dict[str, Dict[int, tuple]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != FORECAST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(FORECAST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                job_id, step, mean, std = row
                rows.setdefault(job_id.strip(), {})[int(step)] = (float(mean), float(std))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
    out = {}
    for job_id, steps in rows.items():
        order = sorted(steps)
        if order != list(range(len(order))):
            raise ValueError(f"{path}: job {job_id} steps must be 0..{len(order) - 1}")
        out[job_id] = ProbabilisticForecast([steps[s][0] for s in order],
                                            [steps[s][1] for s in order])
    return out


def write_forecast_file(path: Union[str, Path], forecasts: Dict[str, ProbabilisticForecast]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FORECAST_HEADER)
        for job_id, fc in forecasts.items():
            for step, (m, s) in enumerate(zip(fc.mean, fc.std)):
                writer.writerow([job_id, step, repr(float(m)), repr(float(s))])


class FileForecastPredictor(Predictor):
    """Serves forecasts produced offline (e.g. by a neural model) from a forecast file."""

    min_history = 0

    def __init__(self, forecast: ProbabilisticForecast):
        self._forecast_value = forecast

    @classmethod
    def from_file(cls, path, job_id: str) -> "FileForecastPredictor":
        table = load_forecast_file(path)
        if job_id not in table:
            raise KeyError(f"{path}: no forecast for job {job_id}")
        return cls(table[job_id])

    def forecast(self, history: RateHistory, horizon: int) -> ProbabilisticForecast:
        fc = self._forecast_value
        if fc.horizon >= horizon:
            return ProbabilisticForecast(fc.mean[:horizon], fc.std[:horizon])
        pad = horizon - fc.horizon
        return ProbabilisticForecast(np.concatenate((fc.mean, np.full(pad, fc.mean[-1]))),
                                     np.concatenate((fc.std, np.full(pad, fc.std[-1]))))

    def _forecast(self, rates, horizon):  # pragma: no cover - forecast is overridden
        raise NotImplementedError


def create_predictor(kind: str, **kwargs) -> Predictor:
    kinds = {
        "damped-mean": DampedMeanPredictor,
        "seasonal-naive": SeasonalNaivePredictor,
        "last-value": LastValuePredictor,
        "oracle": OraclePredictor,
    }
    if kind not in kinds:
        raise ValueError(f"unknown predictor {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**kwargs)
