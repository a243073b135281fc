"""
Central reference solver for tiny instances.

The controllers track the saddle point of the regularized Lagrangian

    L(x, D) = sum_i f_i(x_i) + nu/2 |x|^2
              + sum_j D_lower_j (lower_j - g_j(x)) + D_upper_j (g_j(x) - upper_j)
              - eps/2 |D|^2

over x in the device feasible sets and D >= 0, with g linear. The inner
maximization has the closed form D = max(0, violation) / eps, which leaves a
smooth strongly convex problem in x alone. That problem is solved by
accelerated projected gradient with adaptive restart, and the duals are
recovered from the optimum.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from derms.config import CentralInstanceConfig
from derms.control import (
    AlgorithmParams,
    ControllerState,
    coordinator_step,
    local_controller_step,
)
from derms.devices import (
    BatteryParams,
    Der,
    DeviceState,
    PvParams,
    battery_limits,
    cost,
    cost_curvature,
    cost_gradient,
    project,
)
from derms.errors import OracleError, ParameterError
from derms.network import SensitivityModel, ServiceGradients
from derms.profiles import Profile
from derms.services import BoundSchedule, DualState, GridService, ServiceKind

logger = logging.getLogger(__name__)

MAX_DERS = 3
MAX_MEASUREMENTS = 4
DEFAULT_TOLERANCE = 1e-9
MAX_ITERATIONS = 1_000_000
CHECK_EVERY = 10


@dataclass(frozen=True, eq=False)
class CentralInstance:
    """Static problem: devices at fixed states and a linear measurement model.

    ``g(x) = offset + dg_dp @ P + dg_dq @ Q``; everything is per-unit.
    """

    devices: tuple[Der, ...]
    states: tuple[DeviceState, ...]
    offset: np.ndarray
    dg_dp: np.ndarray
    dg_dq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    nu: float = 1e-3
    epsilon: float = 1e-4
    t: float = 0.0
    reactive_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.devices)
        offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        m = offset.size
        if not 1 <= n <= MAX_DERS:
            raise ParameterError(f"central instances hold 1 to {MAX_DERS} DERs, got {n}")
        if not 1 <= m <= MAX_MEASUREMENTS:
            raise ParameterError(f"central instances hold 1 to {MAX_MEASUREMENTS} measurements, got {m}")
        if len(self.states) != n:
            raise ParameterError("one state per device is required")
        arrays = {}
        for name in ("dg_dp", "dg_dq"):
            arrays[name] = np.asarray(getattr(self, name), dtype=float).reshape(m, n)
        for name in ("lower", "upper"):
            arrays[name] = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (m,)).copy()
        if np.any(arrays["lower"] > arrays["upper"]):
            raise ParameterError("lower bound exceeds upper bound")
        if self.nu < 0 or self.epsilon <= 0:
            raise ParameterError("nu must be non-negative and epsilon positive")
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "offset", offset)
        for name, value in arrays.items():
            object.__setattr__(self, name, value)
        object.__setattr__(self, "reactive_mask",
                           np.array([1.0 if d.has_reactive else 0.0 for d in self.devices]))

    @classmethod
    def from_sensitivities(cls, devices: Sequence[Der], states: Sequence[DeviceState],
                           sensitivities: SensitivityModel, service: GridService, offset: Sequence[float],
                           params: AlgorithmParams, t: float = 0.0) -> "CentralInstance":
        """Instance whose linear model is the frozen sensitivity rows of ``service``."""
        dp, dq = sensitivities.rows_for(service)
        lower, upper = service.schedule.lower[0], service.schedule.upper[0]
        return cls(tuple(devices), tuple(states), np.asarray(offset), dp, dq, lower, upper,
                   nu=params.nu, epsilon=params.epsilon, t=t)

    @classmethod
    def from_config(cls, cfg: CentralInstanceConfig) -> "CentralInstance":
        devices, states = [], []
        for dev in cfg.devices:
            if dev.kind == "pv":
                params = PvParams(inverter_rating=dev.inverter_rating,
                                  availability=Profile.constant(dev.available))
                devices.append(Der(dev.id, 0, params))
                states.append(DeviceState(p=0.0))
            else:
                params = BatteryParams(capacity=dev.capacity, charge_limit=dev.charge_limit,
                                       discharge_limit=dev.discharge_limit, dt_hours=dev.dt_hours,
                                       preferred_soc=dev.preferred_soc)
                devices.append(Der(dev.id, 0, params))
                states.append(DeviceState(p=0.0, soc=dev.soc))
        return cls(tuple(devices), tuple(states), np.asarray(cfg.offset), np.asarray(cfg.dg_dp),
                   np.asarray(cfg.dg_dq), np.asarray(cfg.lower), np.asarray(cfg.upper),
                   nu=cfg.nu, epsilon=cfg.epsilon)

    def measurements(self, x: np.ndarray) -> np.ndarray:
        return self.offset + self.dg_dp @ x[:, 0] + self.dg_dq @ (x[:, 1] * self.reactive_mask)

    def optimal_duals(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.measurements(x)
        return (np.maximum(0.0, self.lower - g) / self.epsilon,
                np.maximum(0.0, g - self.upper) / self.epsilon)

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.array([project(d, p, q, s, self.t)
                         for d, s, (p, q) in zip(self.devices, self.states, x)])

    def lagrangian_gradient(self, x: np.ndarray, d_lower: np.ndarray, d_upper: np.ndarray) -> np.ndarray:
        states = [DeviceState(p=p, q=q, soc=s.soc) for (p, q), s in zip(x, self.states)]
        grad = np.array([cost_gradient(d, s, self.t) for d, s in zip(self.devices, states)])
        weight = d_lower - d_upper
        grad[:, 0] += self.nu * x[:, 0] - weight @ self.dg_dp
        grad[:, 1] += self.nu * x[:, 1] - weight @ self.dg_dq
        grad[:, 1] *= self.reactive_mask
        return grad

    def reduced_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.lagrangian_gradient(x, *self.optimal_duals(x))

    def objective(self, x: np.ndarray) -> float:
        """Regularized Lagrangian at the inner-optimal duals."""
        states = [DeviceState(p=p, q=q * m, soc=s.soc)
                  for (p, q), s, m in zip(x, self.states, self.reactive_mask)]
        g = self.measurements(x)
        penalty = (np.sum(np.maximum(0.0, self.lower - g) ** 2)
                   + np.sum(np.maximum(0.0, g - self.upper) ** 2)) / (2.0 * self.epsilon)
        return (sum(cost(d, s, self.t) for d, s in zip(self.devices, states))
                + 0.5 * self.nu * float(np.sum(x ** 2)) + float(penalty))

    def lipschitz(self) -> float:
        curvature = max(max(cost_curvature(d)) for d in self.devices)
        a = np.hstack([self.dg_dp, self.dg_dq * self.reactive_mask])
        return curvature + self.nu + float(np.linalg.norm(a, 2)) ** 2 / self.epsilon


@dataclass(frozen=True, eq=False)
class CentralSolution:
    injections: np.ndarray
    d_lower: np.ndarray
    d_upper: np.ndarray
    value: float
    iterations: int
    residual: float


def kkt_residual(instance: CentralInstance, x: np.ndarray, d_lower: np.ndarray, d_upper: np.ndarray) -> float:
    """Unit-step projected-gradient residual of the saddle point conditions."""
    x = np.asarray(x, dtype=float)
    primal = x - instance.project(x - instance.lagrangian_gradient(x, d_lower, d_upper))
    g = instance.measurements(x)
    eps = instance.epsilon
    dual_lower = d_lower - np.maximum(0.0, d_lower + instance.lower - g - eps * d_lower)
    dual_upper = d_upper - np.maximum(0.0, d_upper + g - instance.upper - eps * d_upper)
    return float(max(np.abs(primal).max(), np.abs(dual_lower).max(), np.abs(dual_upper).max()))


def solve_central(instance: CentralInstance, *, tolerance: float = DEFAULT_TOLERANCE,
                  max_iterations: int = MAX_ITERATIONS) -> CentralSolution:
    """Regularized saddle point of ``instance``.

    This is not a projected-gradient primal-dual iteration with diminishing
    steps. The duals are eliminated in closed form and the primal problem is
    solved by accelerated projected gradient (FISTA with adaptive restart)
    with the fixed step 1/L, which converges to the same saddle point in far
    fewer iterations. ``track_linear_plant`` runs the actual primal-dual
    controllers on the same instance and is checked against this result.

    Raises:
        OracleError: The KKT residual did not drop below ``tolerance``.
    """
    step = 1.0 / instance.lipschitz()
    x = instance.project(np.zeros((len(instance.devices), 2)))
    y = x.copy()
    theta = 1.0
    residual = math.inf
    for iteration in range(1, max_iterations + 1):
        x_new = instance.project(y - step * instance.reduced_gradient(y))
        if np.sum((y - x_new) * (x_new - x)) > 0:
            theta, y = 1.0, x_new
        else:
            theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            y = x_new + ((theta - 1.0) / theta_next) * (x_new - x)
            theta = theta_next
        x = x_new
        if iteration % CHECK_EVERY == 0:
            residual = kkt_residual(instance, x, *instance.optimal_duals(x))
            if residual < tolerance:
                d_lower, d_upper = instance.optimal_duals(x)
                logger.debug(f"Central solve converged in {iteration} iterations (residual {residual:.2e})")
                return CentralSolution(x, d_lower, d_upper, instance.objective(x), iteration, residual)
    raise OracleError(f"central solve did not converge in {max_iterations} iterations "
                      f"(residual {residual:.3e})", iterations=max_iterations, residual=residual)


def grid_search_central(instance: CentralInstance, resolution: float = 1e-3) -> tuple[np.ndarray, float]:
    """Dense-grid minimizer of a one-DER instance, for cross-checking."""
    if len(instance.devices) != 1:
        raise ParameterError("grid search handles single-DER instances only")
    device, state = instance.devices[0], instance.states[0]
    count = int(round(1.0 / resolution)) + 1
    match device.params:
        case PvParams() as pv:
            rating = pv.inverter_rating
            p_grid = np.linspace(0.0, min(pv.available_at(instance.t), rating), count)
            q_grid = np.linspace(-rating, rating, 2 * count - 1)
            p, q = np.meshgrid(p_grid, q_grid, indexing="ij")
            inside = p ** 2 + q ** 2 <= rating ** 2 * (1.0 + 1e-12)
            p, q = p[inside], q[inside]
            own = pv.cost_p * (p - pv.available_at(instance.t)) ** 2 + pv.cost_q * q ** 2
        case BatteryParams() as bat:
            p = np.linspace(*battery_limits(bat, state.soc), count)
            q = np.zeros_like(p)
            gap = state.soc / 100.0 - p * bat.dt_hours / bat.capacity - bat.preferred_soc / 100.0
            own = bat.cost_weight * gap ** 2
        case _:
            raise ParameterError(f"unsupported device {device.id}")

    g = instance.offset[:, None] + instance.dg_dp[:, :1] * p[None, :] + instance.dg_dq[:, :1] * q[None, :]
    penalty = (np.sum(np.maximum(0.0, instance.lower[:, None] - g) ** 2, axis=0)
               + np.sum(np.maximum(0.0, g - instance.upper[:, None]) ** 2, axis=0)) / (2.0 * instance.epsilon)
    values = own + 0.5 * instance.nu * (p ** 2 + q ** 2) + penalty
    best = int(np.argmin(values))
    return np.array([[p[best], q[best]]]), float(values[best])


@dataclass(frozen=True, eq=False)
class TrackingResult:
    injections: np.ndarray
    history: np.ndarray
    alpha: np.ndarray
    beta: float


def track_linear_plant(instance: CentralInstance, params: AlgorithmParams, *, alpha_init: float,
                       beta_init: float, ticks: int = 5000, decrease: float = 0.995,
                       adaptive: bool = True, start: np.ndarray | None = None) -> TrackingResult:
    """Run the coordinator and local controllers against the instance's linear model.

    Args:
        instance: Static problem; its linear model is the plant.
        params: Algorithm constants (``nu`` and ``epsilon`` should match the instance).
        alpha_init: Initial primal step size for every DER.
        beta_init: Initial dual step size.
        ticks: Number of control ticks.
        decrease: Service decrease factor.
        adaptive: Tune step sizes.
        start: Initial (P, Q) per DER; defaults to each device's cost minimum.

    Returns:
        Final injections, the per-tick injection history and final step sizes.
    """
    m = instance.offset.size
    service = GridService(
        id="linear",
        kind=ServiceKind.VOLTAGE,
        measurement_ids=tuple(range(m)),
        schedule=BoundSchedule(np.array([0.0]), instance.lower[None, :], instance.upper[None, :]),
        beta_init=beta_init,
        decrease=decrease,
        horizon_s=math.inf,
    )
    rows = ServiceGradients(instance.dg_dp, instance.dg_dq * instance.reactive_mask)
    if start is None:
        start = np.array([[d.params.available_at(instance.t), 0.0] if d.has_reactive else [0.0, 0.0]
                          for d in instance.devices])
    x0 = instance.project(np.asarray(start, dtype=float))
    controllers = [ControllerState.initial(alpha_init, DeviceState(p=p, q=q, soc=s.soc))
                   for (p, q), s in zip(x0, instance.states)]
    dual = DualState.zeros(m, beta_init)
    history = np.empty((ticks + 1, len(instance.devices), 2))
    history[0] = x0

    for k in range(1, ticks + 1):
        x = np.array([[c.state.p, c.state.q] for c in controllers])
        result = coordinator_step(service, dual, instance.measurements(x),
                                  (instance.lower, instance.upper), rows, params, adaptive=adaptive)
        dual = result.dual
        controllers = [local_controller_step(dev, ctrl, [result.signal.for_der(i)], params, instance.t,
                                             adaptive=adaptive)
                       for i, (dev, ctrl) in enumerate(zip(instance.devices, controllers))]
        history[k] = [[c.state.p, c.state.q] for c in controllers]

    return TrackingResult(
        injections=history[-1].copy(),
        history=history,
        alpha=np.array([c.alpha for c in controllers]),
        beta=dual.beta,
    )
