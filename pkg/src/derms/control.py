"""
Primal-dual control with cosine-similarity step-size tuning.

One tick, for every service coordinator and then for every local controller:

1. Estimate the update with the current step size.
2. Compare the estimated change with the last committed change (cosine
   similarity). Aligned changes grow the step size, opposed changes shrink it.
3. Commit the update with the new step size.

Everything here is per-unit and free of side effects; states are immutable
and each step returns the next one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, model_validator

from derms.devices import Der, DeviceState, cost_gradient, project
from derms.errors import MeasurementError, ParameterError
from derms.network import ServiceGradients
from derms.services import DualState, GridService

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12


class AlgorithmParams(BaseModel):
    """Tuning constants shared by the coordinator and the local controllers."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    nu: float = Field(1e-3, gt=0, description="primal regularization")
    epsilon: float = Field(1e-4, gt=0, description="dual regularization")
    s_lower: float = Field(0.0, ge=-1.0, le=1.0)
    s_upper: float = Field(0.9, ge=-1.0, le=1.0)
    gamma_up: float = Field(1.005, gt=1.0, description="common increase factor")
    gamma_down_der: float = Field(0.95, gt=0.0, lt=1.0)
    der_decrease: dict[str, float] = Field(default_factory=dict,
                                           description="per-DER decrease factor overrides")
    clamp_steps: bool = True
    step_floor_ratio: float = Field(1e-6, gt=0)
    step_ceiling_ratio: float = Field(1e6, gt=1)

    @model_validator(mode="after")
    def _check_thresholds(self) -> "AlgorithmParams":
        if not self.s_lower < self.s_upper:
            raise ValueError(f"s_lower ({self.s_lower}) must be below s_upper ({self.s_upper})")
        for der, factor in self.der_decrease.items():
            if not 0.0 < factor < 1.0:
                raise ValueError(f"decrease factor for {der} must lie in (0, 1), got {factor}")
        return self

    def decrease_for(self, der_id: str) -> float:
        return self.der_decrease.get(der_id, self.gamma_down_der)


def cosine_similarity(x1: ArrayLike, x2: ArrayLike) -> float:
    """Normalized inner product; 0 when either vector is (numerically) zero."""
    a = np.asarray(x1, dtype=float).ravel()
    b = np.asarray(x2, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cosine similarity of vectors with lengths {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def step_limits(initial: float, params: AlgorithmParams) -> tuple[float, float] | None:
    """Clamp range for a step size that started at ``initial``; ``None`` when clamping is off."""
    if not params.clamp_steps:
        return None
    return initial * params.step_floor_ratio, initial * params.step_ceiling_ratio


def at_step_limit(step: float, initial: float, params: AlgorithmParams) -> bool:
    limits = step_limits(initial, params)
    return limits is not None and not limits[0] < step < limits[1]


def adapt_step_size(step: float, similarity: float, params: AlgorithmParams, decrease: float,
                    initial: float | None = None, *, owner: str = "step size",
                    warned: bool = False) -> float:
    """Grow, shrink or keep ``step`` depending on ``similarity``.

    The dead band includes both thresholds. When ``initial`` is given and the
    params ask for it, the result is clamped to a fixed ratio range around it.
    A clamp is logged as a warning unless ``warned`` says the owner already
    reported one; repeats go to DEBUG.
    """
    if similarity > params.s_upper:
        new = step * params.gamma_up
    elif similarity < params.s_lower:
        new = step * decrease
    else:
        new = step
    limits = step_limits(initial, params) if initial is not None else None
    if limits is not None and not limits[0] <= new <= limits[1]:
        floor, ceiling = limits
        level = logging.DEBUG if warned else logging.WARNING
        logger.log(level, f"{owner}: step size {new:.3e} clamped to [{floor:.3e}, {ceiling:.3e}]")
        new = min(max(new, floor), ceiling)
    return new


def estimate_dual_update(d_lower: ArrayLike, d_upper: ArrayLike, g: ArrayLike,
                         bounds: tuple[ArrayLike, ArrayLike], beta: float,
                         epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Projected dual ascent step on the regularized Lagrangian."""
    d_lower = np.asarray(d_lower, dtype=float)
    d_upper = np.asarray(d_upper, dtype=float)
    g = np.asarray(g, dtype=float)
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    new_lower = np.maximum(0.0, d_lower + beta * (lower - g - epsilon * d_lower))
    new_upper = np.maximum(0.0, d_upper + beta * (g - upper - epsilon * d_upper))
    return new_lower, new_upper


@dataclass(frozen=True, eq=False)
class DirectionSignal:
    """Per-DER push from one service: ``h_p[i]``, ``h_q[i]`` for DER ``i``."""

    service_id: str
    h_p: np.ndarray
    h_q: np.ndarray

    def for_der(self, index: int) -> tuple[float, float]:
        return float(self.h_p[index]), float(self.h_q[index])


@dataclass(frozen=True, eq=False)
class CoordinatorResult:
    signal: DirectionSignal
    dual: DualState

    @property
    def beta(self) -> float:
        return self.dual.beta


def coordinator_step(service: GridService, dual: DualState, measurements: ArrayLike,
                     bounds: tuple[ArrayLike, ArrayLike], sensitivities: ServiceGradients,
                     params: AlgorithmParams, *, adaptive: bool = True) -> CoordinatorResult:
    """One coordinator tick for ``service``.

    Args:
        service: The service being coordinated.
        dual: Dual state after the previous tick.
        measurements: Current measurement vector, per-unit.
        bounds: (lower, upper) in force now, per-unit.
        sensitivities: dG/dP and dG/dQ rows for the service's measurements.
        params: Algorithm constants.
        adaptive: Tune beta; ``False`` keeps it frozen.

    Returns:
        Direction signals for every DER and the committed dual state.
    """
    g = np.asarray(measurements, dtype=float)
    m = len(service.measurement_ids)
    if g.shape != (m,) or not np.all(np.isfinite(g)):
        raise MeasurementError(f"service {service.id}: expected {m} finite measurements, got {g.tolist()}")
    dp, dq = sensitivities
    if dp.shape[0] != m or dq.shape != dp.shape:
        raise ParameterError(f"service {service.id}: sensitivity rows {dp.shape} do not match {m} measurements")

    beta = dual.beta
    if adaptive and dual.previous_lower is not None:
        est_lower, est_upper = estimate_dual_update(dual.lower, dual.upper, g, bounds, beta, params.epsilon)
        similarity = cosine_similarity(np.concatenate([est_lower, est_upper]) - dual.stacked,
                                       dual.stacked - dual.previous_stacked)
        beta = adapt_step_size(beta, similarity, params, service.decrease, initial=dual.beta_init,
                               owner=f"service {service.id}", warned=dual.clamp_warned)

    new_lower, new_upper = estimate_dual_update(dual.lower, dual.upper, g, bounds, beta, params.epsilon)
    weight = new_lower - new_upper
    signal = DirectionSignal(service.id, h_p=weight @ dp, h_q=weight @ dq)
    committed = DualState(
        lower=new_lower,
        upper=new_upper,
        beta=beta,
        beta_init=dual.beta_init,
        previous_lower=dual.lower,
        previous_upper=dual.upper,
        ticks=dual.ticks + 1,
        clamp_warned=dual.clamp_warned or at_step_limit(beta, dual.beta_init, params),
    )
    return CoordinatorResult(signal=signal, dual=committed)


@dataclass(frozen=True)
class ControllerState:
    """Local controller memory for one DER.

    ``state`` is the device operating point the next update starts from;
    ``previous`` is the (P, Q) the last committed update started from.
    """

    alpha: float
    alpha_init: float
    state: DeviceState
    previous: tuple[float, float] | None = None
    ticks: int = 0
    clamp_warned: bool = False

    @classmethod
    def initial(cls, alpha: float, state: DeviceState) -> "ControllerState":
        if not alpha > 0:
            raise ParameterError(f"initial step size must be positive, got {alpha}")
        return cls(alpha=alpha, alpha_init=alpha, state=state)

    def with_state(self, state: DeviceState) -> "ControllerState":
        return replace(self, state=state)


def _as_vector(device: Der, p: float, q: float) -> np.ndarray:
    return np.array([p, q]) if device.has_reactive else np.array([p])


def local_controller_step(device: Der, controller: ControllerState,
                          signals: Sequence[tuple[float, float]] | Mapping[str, tuple[float, float]],
                          params: AlgorithmParams, t: float, *,
                          adaptive: bool = True) -> ControllerState:
    """One local-controller tick.

    Args:
        device: The DER, in per-unit.
        controller: Memory after the previous tick; ``controller.state`` is the
            operating point to update from.
        signals: (H^P, H^Q) from every service, as a sequence or keyed by service.
        params: Algorithm constants.
        t: Simulation time, for the feasible set.
        adaptive: Tune alpha; ``False`` keeps it frozen.

    Returns:
        Controller state whose ``state`` holds the committed set point.
    """
    pairs = list(signals.values()) if isinstance(signals, Mapping) else list(signals)
    h_p = sum(p for p, _ in pairs)
    h_q = sum(q for _, q in pairs)
    state = controller.state
    grad_p, grad_q = cost_gradient(device, state, t)
    direction = np.array([grad_p - h_p + params.nu * state.p,
                          grad_q - h_q + params.nu * state.q])
    if not np.all(np.isfinite(direction)):
        raise ParameterError(f"non-finite update direction for {device.id}: {direction.tolist()}")
    current = _as_vector(device, state.p, state.q)

    def step(alpha: float) -> tuple[float, float]:
        return project(device, state.p - alpha * direction[0], state.q - alpha * direction[1], state, t)

    alpha = controller.alpha
    if adaptive and controller.previous is not None:
        estimate = _as_vector(device, *step(alpha))
        similarity = cosine_similarity(estimate - current, current - _as_vector(device, *controller.previous))
        alpha = adapt_step_size(alpha, similarity, params, params.decrease_for(device.id),
                                initial=controller.alpha_init, owner=f"DER {device.id}",
                                warned=controller.clamp_warned)

    p, q = step(alpha)
    return ControllerState(
        alpha=alpha,
        alpha_init=controller.alpha_init,
        state=DeviceState(p=p, q=q, soc=state.soc),
        previous=(state.p, state.q),
        ticks=controller.ticks + 1,
        clamp_warned=controller.clamp_warned or at_step_limit(alpha, controller.alpha_init, params),
    )
