"""
DER device models: curtailable PV inverters and batteries.

Every function here is unit-agnostic. Parameters and states are expressed in
one consistent unit system (SI in configuration, per-unit inside the
controllers) and cost weights are formulas of the rating, so they follow the
unit system of the rating.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Union

from derms.errors import ParameterError
from derms.profiles import Profile

logger = logging.getLogger(__name__)

CURTAILMENT_WEIGHT = 0.2
REACTIVE_WEIGHT = 0.002
SOC_WEIGHT = 0.01


@dataclass(frozen=True)
class PvParams:
    """Curtailable PV behind a grid-forming inverter.

    Attributes:
        inverter_rating: Apparent-power rating INV.
        availability: Available active power over time, same unit as the rating.
        curtailment_weight: Numerator of the active-power cost weight (c_P = w / INV).
        reactive_weight: Numerator of the reactive-power cost weight (c_Q = w / INV).
    """

    inverter_rating: float
    availability: Profile
    curtailment_weight: float = CURTAILMENT_WEIGHT
    reactive_weight: float = REACTIVE_WEIGHT

    def __post_init__(self):
        if not self.inverter_rating > 0:
            raise ParameterError(f"inverter rating must be positive, got {self.inverter_rating}")

    @property
    def cost_p(self) -> float:
        return self.curtailment_weight / self.inverter_rating

    @property
    def cost_q(self) -> float:
        return self.reactive_weight / self.inverter_rating

    def available_at(self, t: float) -> float:
        p_av = self.availability.at(t)
        if p_av < 0:
            raise ParameterError(f"available PV power is negative at t={t}: {p_av}")
        return p_av

    def scaled(self, factor: float) -> "PvParams":
        """Same device with every power quantity multiplied by ``factor``."""
        return replace(self, inverter_rating=self.inverter_rating * factor,
                       availability=self.availability.scaled(factor))


@dataclass(frozen=True)
class BatteryParams:
    """Battery with SOC-dependent power limits and no reactive capability."""

    capacity: float
    charge_limit: float
    discharge_limit: float
    dt_hours: float
    preferred_soc: float = 60.0
    soc_min: float = 10.0
    soc_max: float = 90.0
    cost_weight: float = SOC_WEIGHT

    def __post_init__(self):
        if not self.capacity > 0:
            raise ParameterError(f"battery capacity must be positive, got {self.capacity}")
        if not self.dt_hours > 0:
            raise ParameterError("battery dt must be positive")
        if not 0.0 <= self.soc_min <= self.soc_max <= 100.0:
            raise ParameterError(f"SOC limits must satisfy 0 <= min <= max <= 100, got "
                                 f"[{self.soc_min}, {self.soc_max}]")
        for name in ("charge_limit", "discharge_limit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ParameterError(f"{name} must be finite and non-negative, got {value}")

    def scaled(self, factor: float) -> "BatteryParams":
        return replace(self, capacity=self.capacity * factor,
                       charge_limit=self.charge_limit * factor,
                       discharge_limit=self.discharge_limit * factor)


DeviceParams = Union[PvParams, BatteryParams]


@dataclass(frozen=True)
class DeviceState:
    p: float
    q: float = 0.0
    soc: float | None = None


@dataclass(frozen=True)
class Der:
    """One controllable device at a bus."""

    id: str
    bus: int
    params: DeviceParams

    @property
    def kind(self) -> str:
        return "pv" if isinstance(self.params, PvParams) else "battery"

    @property
    def has_reactive(self) -> bool:
        return isinstance(self.params, PvParams)

    def scaled(self, factor: float) -> "Der":
        return replace(self, params=self.params.scaled(factor))


def cost(device: Der, state: DeviceState, t: float) -> float:
    match device.params:
        case PvParams() as pv:
            shortfall = state.p - pv.available_at(t)
            return pv.cost_p * shortfall ** 2 + pv.cost_q * state.q ** 2
        case BatteryParams() as bat:
            return bat.cost_weight * _soc_gap(bat, state) ** 2
    raise TypeError(f"unknown device params {type(device.params).__name__}")


def _soc_gap(bat: BatteryParams, state: DeviceState) -> float:
    return state.soc / 100.0 - state.p * bat.dt_hours / bat.capacity - bat.preferred_soc / 100.0


def cost_gradient(device: Der, state: DeviceState, t: float) -> tuple[float, float]:
    """(dF/dP, dF/dQ) of the device cost at ``state``."""
    match device.params:
        case PvParams() as pv:
            return (2.0 * pv.cost_p * (state.p - pv.available_at(t)), 2.0 * pv.cost_q * state.q)
        case BatteryParams() as bat:
            slope = -bat.dt_hours / bat.capacity
            return (2.0 * bat.cost_weight * _soc_gap(bat, state) * slope, 0.0)
    raise TypeError(f"unknown device params {type(device.params).__name__}")


def cost_curvature(device: Der) -> tuple[float, float]:
    """Second derivatives (d2F/dP2, d2F/dQ2); the cost is separable and quadratic."""
    match device.params:
        case PvParams() as pv:
            return (2.0 * pv.cost_p, 2.0 * pv.cost_q)
        case BatteryParams() as bat:
            return (2.0 * bat.cost_weight * (bat.dt_hours / bat.capacity) ** 2, 0.0)
    raise TypeError(f"unknown device params {type(device.params).__name__}")


def project_pv(p: float, q: float, params: PvParams, t: float) -> tuple[float, float]:
    """Euclidean projection onto {0 <= P <= P_av} intersected with the disk of radius INV.

    Clamp first; if the clamped point leaves the disk, the answer is either the
    radial projection onto the circle (when it lands inside the strip) or the
    nearest corner of the set.
    """
    rating = params.inverter_rating
    p_cap = min(params.available_at(t), rating)
    p_box = min(max(p, 0.0), p_cap)
    if p_box * p_box + q * q <= rating * rating:
        return p_box, q

    norm = math.hypot(p, q)
    p_radial, q_radial = rating * p / norm, rating * q / norm
    if 0.0 <= p_radial <= p_cap:
        return p_radial, q_radial

    q_edge = math.sqrt(max(rating * rating - p_cap * p_cap, 0.0))
    corners = ((p_cap, q_edge), (p_cap, -q_edge), (0.0, rating), (0.0, -rating))
    return min(corners, key=lambda c: (c[0] - p) ** 2 + (c[1] - q) ** 2)


def battery_limits(params: BatteryParams, soc: float) -> tuple[float, float]:
    """(P_min, P_max) for the next interval given the current SOC."""
    power_per_percent = params.capacity / params.dt_hours / 100.0
    p_max = min(params.discharge_limit, max(soc - params.soc_min, 0.0) * power_per_percent)
    p_min = -min(params.charge_limit, max(params.soc_max - soc, 0.0) * power_per_percent)
    return p_min, p_max


def project_battery(p: float, params: BatteryParams, state: DeviceState) -> float:
    p_min, p_max = battery_limits(params, state.soc)
    return min(max(p, p_min), p_max)


def project(device: Der, p: float, q: float, state: DeviceState, t: float) -> tuple[float, float]:
    """Project (P, Q) onto the device's feasible set at time ``t``."""
    match device.params:
        case PvParams() as pv:
            return project_pv(p, q, pv, t)
        case BatteryParams() as bat:
            return project_battery(p, bat, state), 0.0
    raise TypeError(f"unknown device params {type(device.params).__name__}")


def is_feasible(device: Der, p: float, q: float, state: DeviceState, t: float,
                tolerance: float = 1e-9) -> bool:
    match device.params:
        case PvParams() as pv:
            slack = tolerance * pv.inverter_rating
            return (-slack <= p <= pv.available_at(t) + slack
                    and math.hypot(p, q) <= pv.inverter_rating * (1.0 + tolerance))
        case BatteryParams() as bat:
            p_min, p_max = battery_limits(bat, state.soc)
            slack = tolerance * max(bat.charge_limit, bat.discharge_limit, 1e-30)
            return p_min - slack <= p <= p_max + slack and q == 0.0
    raise TypeError(f"unknown device params {type(device.params).__name__}")


def step_soc(state: DeviceState, params: BatteryParams, p_implemented: float) -> float:
    """SOC after injecting ``p_implemented`` for one interval (discharge is positive)."""
    soc = state.soc - 100.0 * p_implemented * params.dt_hours / params.capacity
    clamped = min(max(soc, params.soc_min), params.soc_max)
    if abs(clamped - soc) > 1e-9:
        logger.warning(f"SOC {soc:.6f} clamped to [{params.soc_min}, {params.soc_max}]")
    return clamped
