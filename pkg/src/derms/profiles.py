"""
Piecewise-constant time series for loads and PV availability.

A profile is a list of breakpoints; the value at time ``t`` is the value of the
last breakpoint at or before ``t`` (right-continuous steps). Synthetic
generators stand in for metered data and are fully determined by their RNG.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from derms.errors import ConfigError, ParameterError

logger = logging.getLogger(__name__)

LOAD_STEP_S = 900.0
PV_STEP_S = 60.0


@dataclass(frozen=True, eq=False)
class Profile:
    """Right-continuous step series."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or times.size == 0:
            raise ParameterError("profile needs matching, non-empty 1-D times and values")
        if np.any(np.diff(times) <= 0):
            raise ParameterError("profile times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ParameterError("profile values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float) -> "Profile":
        return cls(np.array([0.0]), np.array([float(value)]))

    def at(self, t: float) -> float:
        """Value in force at time ``t``. Times before the first breakpoint use it."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(idx, 0)])

    def scaled(self, factor: float) -> "Profile":
        return Profile(self.times, self.values * factor)

    def minimum(self) -> float:
        return float(self.values.min())


def read_profile_csv(path: str | Path) -> Profile:
    """Load a profile from CSV.

    The file needs a ``value`` column and either ``time_s`` (seconds from the
    scenario start) or ``timestamp`` (parsed by pandas; the first row becomes
    t = 0).
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse profile {path}: {exc}") from exc

    if "value" not in frame.columns:
        raise ConfigError(f"profile {path} has no 'value' column")
    if "time_s" in frame.columns:
        times = frame["time_s"].to_numpy(dtype=float)
    elif "timestamp" in frame.columns:
        stamps = pd.to_datetime(frame["timestamp"])
        times = (stamps - stamps.iloc[0]).dt.total_seconds().to_numpy()
    else:
        raise ConfigError(f"profile {path} needs a 'time_s' or 'timestamp' column")

    logger.debug(f"Loaded profile {path} with {len(frame)} rows")
    try:
        return Profile(times, frame["value"].to_numpy(dtype=float))
    except ParameterError as exc:
        raise ConfigError(f"profile {path}: {exc}") from exc


def _grid(horizon_s: float, step_s: float) -> np.ndarray:
    return np.arange(0.0, horizon_s + step_s, step_s)


def clear_sky_fraction(hour: np.ndarray | float) -> np.ndarray:
    """Bell-shaped PV availability (fraction of rating) between 6:00 and 18:00."""
    phase = np.clip((np.asarray(hour, dtype=float) - 6.0) / 12.0, 0.0, 1.0)
    return np.sin(math.pi * phase)


def load_profile(horizon_s: float, rng: np.random.Generator, *, base: float = 1.0,
                 noise: float = 0.05, start_hour: float = 10.0,
                 step_s: float = LOAD_STEP_S) -> Profile:
    """Load multiplier held constant over ``step_s`` windows.

    A gentle daytime shape (late-morning dip, evening rise) times seeded
    multiplicative noise.
    """
    times = _grid(horizon_s, step_s)
    hours = start_hour + times / 3600.0
    shape = 1.0 - 0.1 * np.sin(math.pi * np.clip((hours - 8.0) / 10.0, 0.0, 1.0))
    jitter = 1.0 + noise * rng.uniform(-1.0, 1.0, size=times.size)
    return Profile(times, base * shape * jitter)


def clear_sky_profile(horizon_s: float, rng: np.random.Generator, *, peak: float = 0.95,
                      noise: float = 0.01, start_hour: float = 10.0,
                      step_s: float = PV_STEP_S) -> Profile:
    """PV availability as a fraction of rating at one-minute granularity."""
    times = _grid(horizon_s, step_s)
    shape = peak * clear_sky_fraction(start_hour + times / 3600.0)
    jitter = 1.0 + noise * rng.uniform(-1.0, 1.0, size=times.size)
    return Profile(times, np.clip(shape * jitter, 0.0, 1.0))


def cloudy_profile(horizon_s: float, rng: np.random.Generator, *, peak: float = 0.95,
                   noise: float = 0.01, start_hour: float = 12.0,
                   step_s: float = PV_STEP_S, clouds_from_s: float = 0.0,
                   depth: tuple[float, float] = (0.3, 0.7),
                   duration_s: tuple[float, float] = (30.0, 120.0),
                   mean_gap_s: float = 180.0) -> Profile:
    """Clear-sky availability with passing clouds.

    Each cloud is a square dip: availability is multiplied by ``1 - depth`` for
    its duration. Depths, durations and gaps are drawn from ``rng``.
    """
    base = clear_sky_profile(horizon_s, rng, peak=peak, noise=noise,
                             start_hour=start_hour, step_s=step_s)

    dips: list[tuple[float, float, float]] = []
    t = clouds_from_s + rng.exponential(mean_gap_s)
    while t < horizon_s:
        length = rng.uniform(*duration_s)
        dips.append((t, min(t + length, horizon_s), rng.uniform(*depth)))
        t += length + rng.exponential(mean_gap_s)

    edges = sorted({*base.times.tolist(), *[d[0] for d in dips], *[d[1] for d in dips]})
    times = np.array([e for e in edges if e <= horizon_s])
    values = np.array([base.at(e) for e in times])
    for start, end, dip in dips:
        inside = (times >= start) & (times < end)
        values[inside] *= 1.0 - dip

    logger.debug(f"Cloudy profile with {len(dips)} dips over {horizon_s:.0f} s")
    return Profile(times, values)
