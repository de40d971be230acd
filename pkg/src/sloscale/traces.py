"""Per-minute arrival traces: loading, rescaling, window averaging, splitting, synthesis."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

MINUTES_PER_DAY = 1440


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RateSeries:
    values: np.ndarray
    interval: float = 60.0
    origin: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("values must be 1-D")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("values must be finite and non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    def with_values(self, values, origin: str = None) -> "RateSeries":
        return RateSeries(values, self.interval, self.origin if origin is None else origin)


def load_trace(path: Union[str, Path], format: str = "minute-count") -> RateSeries:
    """Load a per-minute invocation-count trace.

    ``minute-count``: header plus ``minute,count`` rows; missing minutes are 0.
    ``azure``: Azure Functions 2019 layout, one row per function with
    per-minute columns ``1..1440`` after the identifying columns; all rows
    are summed.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise TraceFormatError(f"{path}: empty trace")
    if format == "minute-count":
        counts = {}
        for lineno, row in enumerate(rows[1:], start=2):
            try:
                if len(row) != 2:
                    raise ValueError
                minute, count = int(row[0]), float(row[1])
                if minute < 0 or count < 0:
                    raise ValueError
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: malformed row {row!r}") from None
            counts[minute] = counts.get(minute, 0.0) + count
        values = np.zeros(max(counts) + 1)
        for minute, count in counts.items():
            values[minute] = count
        return RateSeries(values, 60.0, str(path))
    if format == "azure":
        header = rows[0]
        minute_cols = [i for i, h in enumerate(header) if h.strip().isdigit()]
        if not minute_cols:
            raise TraceFormatError(f"{path}: no per-minute columns in header")
        total = np.zeros(len(minute_cols))
        for lineno, row in enumerate(rows[1:], start=2):
            try:
                total += np.array([float(row[i]) for i in minute_cols])
            except (ValueError, IndexError):
                raise TraceFormatError(f"{path}:{lineno}: malformed row") from None
        return RateSeries(total, 60.0, str(path))
    raise ValueError(f"unknown trace format {format!r}")


def save_trace(series: RateSeries, path: Union[str, Path]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["minute", "count"])
        for minute, count in enumerate(series.values):
            writer.writerow([minute, repr(float(count))])


def rescale(series: RateSeries, lo: float, hi: float) -> RateSeries:
    """Min-max affine map of the series onto ``[lo, hi]`` (constant series -> lo)."""
    if lo < 0 or hi < lo:
        raise ValueError("need 0 <= lo <= hi")
    v = series.values
    vmin, vmax = float(v.min()), float(v.max())
    if vmax == vmin or hi == lo:
        return series.with_values(np.full(len(v), float(lo)))
    return series.with_values(lo + (v - vmin) * (hi - lo) / (vmax - vmin))


def window_average(series: RateSeries, window: int) -> RateSeries:
    """Replace each block of ``window`` values by its mean; a trailing partial
    block is averaged over its actual length."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return series
    v = series.values
    starts = np.arange(0, len(v), window)
    sums = np.add.reduceat(v, starts)
    lengths = np.minimum(starts + window, len(v)) - starts
    return series.with_values(sums / lengths)


def split(series: RateSeries, train_days: int, eval_days: int
          ) -> Tuple[RateSeries, RateSeries]:
    per_day = int(round(MINUTES_PER_DAY * 60.0 / series.interval))
    need = (train_days + eval_days) * per_day
    if len(series) < need:
        raise ValueError(f"series has {len(series)} intervals, needs {need} "
                         f"for {train_days}+{eval_days} days")
    cut = train_days * per_day
    return (series.with_values(series.values[:cut]),
            series.with_values(series.values[cut:need]))


def synth_trace(kind: str, duration: int, seed: int = 0, **params) -> RateSeries:
    """Synthetic per-minute rate series.

    kinds and params:
      constant: rate
      sinusoid: mean, amplitude, period (minutes, default 1440), phase (radians)
      step:     low, high, at (minute of the switch)
      spike:    base, height, spike_rate (bursts/minute), spike_len (minutes)
    Every kind accepts ``noise`` (relative Gaussian noise, default 0), clamped at 0.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(duration, dtype=float)
    noise = float(params.pop("noise", 0.0))
    if kind == "constant":
        v = np.full(duration, float(params.get("rate", 0.0)))
    elif kind == "sinusoid":
        mean = float(params["mean"])
        amp = float(params["amplitude"])
        period = float(params.get("period", MINUTES_PER_DAY))
        phase = float(params.get("phase", 0.0))
        v = mean + amp * np.sin(2 * np.pi * t / period + phase)
    elif kind == "step":
        at = int(params.get("at", duration // 2))
        v = np.where(t < at, float(params["low"]), float(params["high"]))
    elif kind == "spike":
        base = float(params["base"])
        height = float(params["height"])
        spike_rate = float(params.get("spike_rate", 1 / 120))
        spike_len = int(params.get("spike_len", 3))
        v = np.full(duration, base)
        n_spikes = rng.poisson(spike_rate * duration)
        for start in np.sort(rng.integers(0, max(duration, 1), size=n_spikes)):
            v[start:start + spike_len] += height
    else:
        raise ValueError(f"unknown synthetic trace kind {kind!r}")
    if noise > 0:
        v = v * (1.0 + noise * rng.standard_normal(duration))
    return RateSeries(np.maximum(v, 0.0), 60.0, f"synthetic:{kind}")
