"""
Grid services: measurement sets, bound schedules and violation metrics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np
from pydantic import BaseModel

from derms.errors import HorizonError, MeasurementError, ParameterError

if TYPE_CHECKING:
    from derms.sim import Trajectory

logger = logging.getLogger(__name__)


class ServiceKind(str, Enum):
    VOLTAGE = "voltage"
    VPP = "vpp"


DEFAULT_DECREASE = {ServiceKind.VOLTAGE: 0.995, ServiceKind.VPP: 0.5}


@dataclass(frozen=True, eq=False)
class BoundSchedule:
    """Right-continuous bound steps, one column per measurement."""

    times: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        lower = np.atleast_2d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if times.ndim != 1 or times.size == 0:
            raise ParameterError("bound schedule needs at least one entry")
        if lower.shape != upper.shape or lower.shape[0] != times.size:
            raise ParameterError("bound schedule arrays disagree in shape")
        if np.any(np.diff(times) <= 0):
            raise ParameterError("bound schedule times must be strictly increasing")
        if np.any(lower > upper):
            raise ParameterError("lower bound exceeds upper bound")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def constant(cls, lower: float | Sequence[float], upper: float | Sequence[float]) -> "BoundSchedule":
        return cls(np.array([0.0]), np.atleast_2d(lower), np.atleast_2d(upper))

    @classmethod
    def set_points(cls, times: Sequence[float], set_points: Sequence, band: float | Sequence) -> "BoundSchedule":
        """Bounds ``set_point +/- band`` per entry."""
        centre = np.asarray(set_points, dtype=float)
        if centre.ndim == 1:
            centre = centre[:, None]
        half = np.broadcast_to(np.asarray(band, dtype=float), centre.shape)
        return cls(np.asarray(times, dtype=float), centre - half, centre + half)

    @property
    def width(self) -> int:
        return self.lower.shape[1]


@dataclass(frozen=True, eq=False)
class GridService:
    """A grid service as seen by its coordinator.

    ``measurement_ids`` are bus ids for voltage services and group-root bus ids
    for VPP services (the head bus stands for the whole feeder).
    """

    id: str
    kind: ServiceKind
    measurement_ids: tuple[int, ...]
    schedule: BoundSchedule
    beta_init: float
    decrease: float
    horizon_s: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ServiceKind(self.kind))
        object.__setattr__(self, "measurement_ids", tuple(int(m) for m in self.measurement_ids))
        if not self.measurement_ids:
            raise ParameterError(f"service {self.id} has no measurements")
        if self.schedule.width not in (1, len(self.measurement_ids)):
            raise ParameterError(f"service {self.id}: schedule has {self.schedule.width} columns "
                                 f"for {len(self.measurement_ids)} measurements")
        if not self.beta_init > 0:
            raise ParameterError(f"service {self.id}: beta must be positive")
        if not 0.0 < self.decrease < 1.0:
            raise ParameterError(f"service {self.id}: decrease factor must lie in (0, 1)")

    def unit_scale(self, base_power_w: float) -> float:
        """Divide SI measurements by this to get per-unit."""
        return base_power_w if self.kind is ServiceKind.VPP else 1.0


def bounds_at(service: GridService, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-measurement (lower, upper) in force at ``t`` (SI units)."""
    if not 0.0 <= t <= service.horizon_s:
        raise HorizonError(f"t={t} outside the horizon [0, {service.horizon_s}] of {service.id}")
    schedule = service.schedule
    idx = max(int(np.searchsorted(schedule.times, t, side="right")) - 1, 0)
    m = len(service.measurement_ids)
    return (np.broadcast_to(schedule.lower[idx], (m,)).copy(),
            np.broadcast_to(schedule.upper[idx], (m,)).copy())


@dataclass(frozen=True, eq=False)
class DualState:
    """Dual variables of one service plus the tuner's memory.

    ``previous_*`` hold the duals before the last committed update and are
    ``None`` until one update has happened. ``clamp_warned`` is set once beta
    has hit its clamp range.
    """

    lower: np.ndarray
    upper: np.ndarray
    beta: float
    beta_init: float
    previous_lower: np.ndarray | None = None
    previous_upper: np.ndarray | None = None
    ticks: int = 0
    clamp_warned: bool = False

    @classmethod
    def zeros(cls, size: int, beta: float) -> "DualState":
        return cls(lower=np.zeros(size), upper=np.zeros(size), beta=beta, beta_init=beta)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.lower, self.upper])

    @property
    def previous_stacked(self) -> np.ndarray | None:
        if self.previous_lower is None:
            return None
        return np.concatenate([self.previous_lower, self.previous_upper])


@dataclass(frozen=True, eq=False)
class ServiceTrace:
    """Recorded history of one service; arrays are indexed [tick, measurement]."""

    service_id: str
    kind: ServiceKind
    measurement_ids: tuple[int, ...]
    times: np.ndarray
    g: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    dual_lower: np.ndarray
    dual_upper: np.ndarray
    beta: np.ndarray
    h_p: np.ndarray
    h_q: np.ndarray


class ViolationMetrics(BaseModel):
    max_violation: float
    integral_violation: float
    oscillation_count: int


def exceedance(g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, np.maximum(g - upper, lower - g))


def violation_metrics(trajectory: "Trajectory | ServiceTrace", service: GridService | str) -> ViolationMetrics:
    """Bound-violation summary of one service over a trajectory.

    ``integral_violation`` integrates the exceedance over time (left rectangles
    between records, summed over measurements). ``oscillation_count`` counts,
    per measurement, how often the signal moves between below-bounds,
    inside and above-bounds from one record to the next. Only these state
    changes count: a signal that swings up and down while staying above the
    upper bound counts zero, and a value exactly on a bound is inside.
    """
    service_id = service if isinstance(service, str) else service.id
    if isinstance(trajectory, ServiceTrace):
        trace = trajectory
    else:
        try:
            trace = trajectory.services[service_id]
        except KeyError:
            raise MeasurementError(f"trajectory has no service {service_id}") from None
    if trace.times.size == 0:
        raise ParameterError("violation metrics need a non-empty trajectory")

    excess = exceedance(trace.g, trace.lower, trace.upper)
    dt = np.diff(trace.times)
    integral = float(np.sum(excess[:-1] * dt[:, None])) if dt.size else 0.0

    side = np.sign(trace.g - trace.upper).clip(min=0) - np.sign(trace.lower - trace.g).clip(min=0)
    crossings = int(np.count_nonzero(np.diff(side, axis=0)))
    return ViolationMetrics(
        max_violation=float(excess.max()),
        integral_violation=integral,
        oscillation_count=crossings,
    )
