"""
Discrete-time scenario engine.

Each tick applies scheduled tap changes, solves the plant with the injections
the devices actually implement, runs every service coordinator, then every
local controller, steps battery SOCs and records the result.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from derms.config import (
    BatteryConfig,
    ProfileConfig,
    PvConfig,
    ScenarioConfig,
    ServiceConfig,
)
from derms.control import ControllerState, coordinator_step, local_controller_step
from derms.devices import (
    BatteryParams,
    Der,
    DeviceState,
    PvParams,
    is_feasible,
    project,
    step_soc,
)
from derms.errors import ConfigError, InvariantError, SimulationError
from derms.network import (
    NetworkModel,
    SensitivityModel,
    build_sensitivities,
    load_network,
    measure,
    solve_power_flow,
)
from derms.profiles import (
    LOAD_STEP_S,
    PV_STEP_S,
    Profile,
    clear_sky_profile,
    cloudy_profile,
    load_profile,
    read_profile_csv,
)
from derms.services import (
    DEFAULT_DECREASE,
    BoundSchedule,
    DualState,
    GridService,
    ServiceKind,
    ServiceTrace,
    bounds_at,
)

logger = logging.getLogger(__name__)

Scenario = ScenarioConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-tick record of a run. Arrays are indexed [tick] or [tick, DER].

    Injections, measurements and bounds are SI; duals and step sizes are in the
    controllers' per-unit scaling.
    """

    scenario: str
    mode: str
    seed: int
    times: np.ndarray
    tap_ratio: np.ndarray
    der_ids: tuple[str, ...]
    der_kinds: tuple[str, ...]
    p_w: np.ndarray
    q_var: np.ndarray
    soc: np.ndarray
    p_available_w: np.ndarray
    alpha: np.ndarray
    services: dict[str, ServiceTrace]
    completed: bool = True
    diagnostic: str | None = None

    def __len__(self) -> int:
        return len(self.times)

    def final_alpha(self) -> dict[str, float]:
        return {der: float(self.alpha[-1, i]) for i, der in enumerate(self.der_ids)}

    def final_beta(self) -> dict[str, float]:
        return {sid: float(trace.beta[-1]) for sid, trace in self.services.items()}

    def to_frame(self) -> pd.DataFrame:
        """One row per tick, columns as documented in docs/OUTPUT_SCHEMA.md."""
        columns: dict[str, np.ndarray] = {"time_s": self.times, "tap_ratio": self.tap_ratio}
        for i, der in enumerate(self.der_ids):
            columns[f"{der}.p_w"] = self.p_w[:, i]
            columns[f"{der}.q_var"] = self.q_var[:, i]
            if self.der_kinds[i] == "battery":
                columns[f"{der}.soc"] = self.soc[:, i]
            else:
                columns[f"{der}.p_available_w"] = self.p_available_w[:, i]
            columns[f"{der}.alpha"] = self.alpha[:, i]
        for sid, trace in self.services.items():
            columns[f"{sid}.beta"] = trace.beta
            for j, mid in enumerate(trace.measurement_ids):
                prefix = f"{sid}.{mid}"
                columns[f"{prefix}.g"] = trace.g[:, j]
                columns[f"{prefix}.lower"] = trace.lower[:, j]
                columns[f"{prefix}.upper"] = trace.upper[:, j]
                columns[f"{prefix}.dual_lower"] = trace.dual_lower[:, j]
                columns[f"{prefix}.dual_upper"] = trace.dual_upper[:, j]
            for i, der in enumerate(self.der_ids):
                columns[f"{sid}.{der}.h_p"] = trace.h_p[:, i]
                columns[f"{sid}.{der}.h_q"] = trace.h_q[:, i]
        return pd.DataFrame(columns)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        return path


@dataclass
class _Setup:
    net: NetworkModel
    devices: list[Der]
    initial: list[DeviceState]
    services: list[GridService]
    load: Profile
    sensitivities: SensitivityModel
    alpha: float
    beta: dict[str, float]


def build_profile(cfg: ProfileConfig, horizon_s: float, rng: np.random.Generator) -> Profile:
    match cfg.kind:
        case "constant":
            return Profile.constant(cfg.value)
        case "csv":
            return read_profile_csv(cfg.path)
        case "load":
            return load_profile(horizon_s, rng, base=cfg.value, noise=cfg.noise,
                                start_hour=cfg.start_hour, step_s=cfg.step_s or LOAD_STEP_S)
        case "clear-sky":
            return clear_sky_profile(horizon_s, rng, peak=cfg.peak, noise=cfg.noise,
                                     start_hour=cfg.start_hour, step_s=cfg.step_s or PV_STEP_S)
        case "cloudy":
            return cloudy_profile(horizon_s, rng, peak=cfg.peak, noise=cfg.noise,
                                  start_hour=cfg.start_hour, step_s=cfg.step_s or PV_STEP_S,
                                  clouds_from_s=cfg.clouds_from_s)
    raise ConfigError(f"unknown profile kind {cfg.kind}")


def _build_device(cfg: PvConfig | BatteryConfig, profiles: dict[str, Profile],
                  tick_s: float, base_power_w: float) -> tuple[Der, DeviceState]:
    """Per-unit device and its initial operating point."""
    if isinstance(cfg, PvConfig):
        fraction = profiles[cfg.profile or "pv"]
        params = PvParams(
            inverter_rating=cfg.inverter_rating_w,
            availability=fraction.scaled(cfg.inverter_rating_w * cfg.availability_scale),
        )
        device = Der(cfg.id, cfg.bus, params).scaled(1.0 / base_power_w)
        p_av = device.params.available_at(0.0)
        p, q = project(device, p_av, 0.0, DeviceState(p=0.0), 0.0)
        return device, DeviceState(p=p, q=q)
    params = BatteryParams(
        capacity=cfg.capacity_wh,
        charge_limit=cfg.charge_limit_w,
        discharge_limit=cfg.discharge_limit_w,
        dt_hours=tick_s / 3600.0,
        preferred_soc=cfg.preferred_soc,
        soc_min=cfg.soc_min,
        soc_max=cfg.soc_max,
        cost_weight=cfg.cost_weight,
    )
    return Der(cfg.id, cfg.bus, params).scaled(1.0 / base_power_w), DeviceState(p=0.0, soc=cfg.initial_soc)


def _build_service(cfg: ServiceConfig, scenario: ScenarioConfig, devices: list[Der],
                   net: NetworkModel) -> GridService:
    kind = ServiceKind(cfg.kind)
    if cfg.measurements is not None:
        ids = list(cfg.measurements)
    elif kind is ServiceKind.VOLTAGE:
        ids = list(dict.fromkeys(d.bus for d in devices))
    else:
        ids = [net.head_bus]
    unknown = [mid for mid in ids if mid not in net.topology.index]
    if unknown:
        raise ConfigError(f"service {cfg.id} measures unknown buses {unknown}")

    m = len(ids)
    lowers, uppers = [], []
    for entry in cfg.schedule:
        lower, upper = entry.resolved()
        try:
            lowers.append(np.broadcast_to(np.atleast_1d(np.asarray(lower, dtype=float)), (m,)))
            uppers.append(np.broadcast_to(np.atleast_1d(np.asarray(upper, dtype=float)), (m,)))
        except ValueError:
            raise ConfigError(f"service {cfg.id}: bound entry at {entry.time_s} s does not match "
                              f"{m} measurements") from None
    schedule = BoundSchedule(np.array([e.time_s for e in cfg.schedule]), np.array(lowers), np.array(uppers))
    manual = scenario.mode == "manual" and scenario.manual_step is not None
    return GridService(
        id=cfg.id,
        kind=kind,
        measurement_ids=tuple(ids),
        schedule=schedule,
        beta_init=scenario.manual_step if manual else cfg.beta_init,
        decrease=cfg.decrease if cfg.decrease is not None else DEFAULT_DECREASE[kind],
        horizon_s=scenario.horizon_s,
    )


def _sensitivities(net: NetworkModel, devices: list[Der], services: list[GridService]) -> SensitivityModel:
    voltage = [m for s in services if s.kind is ServiceKind.VOLTAGE for m in s.measurement_ids]
    groups = [m for s in services if s.kind is ServiceKind.VPP for m in s.measurement_ids]
    measured = list(dict.fromkeys(voltage)) or list(dict.fromkeys(d.bus for d in devices))
    return build_sensitivities(net, measured, [d.bus for d in devices],
                               list(dict.fromkeys(groups)) or None)


def prepare(scenario: ScenarioConfig) -> _Setup:
    """Turn a validated scenario into per-unit runtime objects."""
    net = (NetworkModel.from_config(scenario.network) if scenario.network is not None
           else load_network(scenario.network_file))
    profiles = {name: build_profile(cfg, scenario.horizon_s, np.random.default_rng([scenario.seed, i]))
                for i, (name, cfg) in enumerate(sorted(scenario.profiles.items()))}

    devices, initial = [], []
    for cfg in scenario.devices:
        if cfg.bus not in net.topology.index:
            raise ConfigError(f"device {cfg.id} sits on unknown bus {cfg.bus}")
        device, state = _build_device(cfg, profiles, scenario.tick_s, net.base_power_w)
        devices.append(device)
        initial.append(state)
    services = [_build_service(cfg, scenario, devices, net) for cfg in scenario.services]

    manual = scenario.mode == "manual" and scenario.manual_step is not None
    return _Setup(
        net=net,
        devices=devices,
        initial=initial,
        services=services,
        load=profiles["load"],
        sensitivities=_sensitivities(net, devices, services),
        alpha=scenario.manual_step if manual else scenario.alpha_init,
        beta={s.id: s.beta_init for s in services},
    )


class _Recorder:
    def __init__(self, scenario: ScenarioConfig, setup: _Setup):
        self.scenario = scenario
        self.devices = setup.devices
        self.base = setup.net.base_power_w
        size, n = scenario.ticks + 1, len(setup.devices)
        self.times = np.arange(size) * scenario.tick_s
        self.tap = np.empty(size)
        self.p, self.q, self.soc, self.p_av, self.alpha = (np.full((size, n), np.nan) for _ in range(5))
        self.services = {}
        for svc in setup.services:
            m = len(svc.measurement_ids)
            self.services[svc.id] = {
                "svc": svc,
                "g": np.empty((size, m)), "lower": np.empty((size, m)), "upper": np.empty((size, m)),
                "dual_lower": np.empty((size, m)), "dual_upper": np.empty((size, m)),
                "beta": np.empty(size), "h_p": np.empty((size, n)), "h_q": np.empty((size, n)),
            }

    def record_service(self, k: int, svc: GridService, g: np.ndarray, bounds: tuple[np.ndarray, np.ndarray],
                       result) -> None:
        rec = self.services[svc.id]
        rec["g"][k] = g
        rec["lower"][k], rec["upper"][k] = bounds
        rec["dual_lower"][k], rec["dual_upper"][k] = result.dual.lower, result.dual.upper
        rec["beta"][k] = result.dual.beta
        rec["h_p"][k], rec["h_q"][k] = result.signal.h_p, result.signal.h_q

    def record_devices(self, k: int, tap: float, implemented: list[DeviceState],
                       controllers: list[ControllerState], t: float) -> None:
        self.tap[k] = tap
        for i, (dev, st, ctrl) in enumerate(zip(self.devices, implemented, controllers)):
            self.p[k, i], self.q[k, i] = st.p * self.base, st.q * self.base
            self.alpha[k, i] = ctrl.alpha
            if isinstance(dev.params, PvParams):
                self.p_av[k, i] = dev.params.available_at(t) * self.base
            else:
                self.soc[k, i] = st.soc

    def build(self, length: int, diagnostic: str | None = None) -> Trajectory:
        cut = slice(0, length)
        traces = {}
        for sid, rec in self.services.items():
            svc = rec["svc"]
            traces[sid] = ServiceTrace(
                service_id=sid, kind=svc.kind, measurement_ids=svc.measurement_ids,
                times=self.times[cut], g=rec["g"][cut], lower=rec["lower"][cut], upper=rec["upper"][cut],
                dual_lower=rec["dual_lower"][cut], dual_upper=rec["dual_upper"][cut],
                beta=rec["beta"][cut], h_p=rec["h_p"][cut], h_q=rec["h_q"][cut],
            )
        return Trajectory(
            scenario=self.scenario.name, mode=self.scenario.mode, seed=self.scenario.seed,
            times=self.times[cut], tap_ratio=self.tap[cut],
            der_ids=tuple(d.id for d in self.devices), der_kinds=tuple(d.kind for d in self.devices),
            p_w=self.p[cut], q_var=self.q[cut], soc=self.soc[cut], p_available_w=self.p_av[cut],
            alpha=self.alpha[cut], services=traces,
            completed=diagnostic is None, diagnostic=diagnostic,
        )


def check_invariants(t: float, devices: list[Der], implemented: list[DeviceState],
               controllers: list[ControllerState], duals: dict[str, DualState]) -> None:
    """Raise InvariantError if any per-tick invariant fails."""
    for sid, dual in duals.items():
        if np.any(dual.lower < 0) or np.any(dual.upper < 0):
            raise InvariantError(f"t={t:g}: negative dual in {sid}")
        if not (math.isfinite(dual.beta) and dual.beta > 0):
            raise InvariantError(f"t={t:g}: step size of {sid} is {dual.beta}")
    for dev, st, ctrl in zip(devices, implemented, controllers):
        if not (math.isfinite(ctrl.alpha) and ctrl.alpha > 0):
            raise InvariantError(f"t={t:g}: step size of {dev.id} is {ctrl.alpha}")
        if not is_feasible(dev, st.p, st.q, st, t):
            raise InvariantError(f"t={t:g}: implemented injection of {dev.id} is infeasible")
        if not is_feasible(dev, ctrl.state.p, ctrl.state.q, st, t):
            raise InvariantError(f"t={t:g}: set point of {dev.id} is infeasible")
        if isinstance(dev.params, BatteryParams) and not dev.params.soc_min - 1e-9 <= st.soc <= dev.params.soc_max + 1e-9:
            raise InvariantError(f"t={t:g}: SOC of {dev.id} is {st.soc}")


def run(scenario: ScenarioConfig) -> Trajectory:
    """Simulate ``scenario`` and return its trajectory.

    Raises:
        SimulationError: The plant did not solve at some tick. The error carries
            the trajectory up to (not including) that tick.
        InvariantError: A per-tick check failed (only when enabled).
    """
    setup = prepare(scenario)
    params = scenario.algorithm
    adaptive = scenario.mode == "adaptive"
    net, devices, services = setup.net, setup.devices, setup.services
    base = net.base_power_w
    gradients = {svc.id: setup.sensitivities.rows_for(svc) for svc in services}
    duals = {svc.id: DualState.zeros(len(svc.measurement_ids), setup.beta[svc.id]) for svc in services}
    controllers = [ControllerState.initial(setup.alpha, st) for st in setup.initial]
    recorder = _Recorder(scenario, setup)
    taps = deque(scenario.tap_schedule)

    logger.info(f"Running {scenario.name} ({scenario.mode}, seed {scenario.seed}): "
                f"{len(devices)} DERs, {len(services)} services, {scenario.ticks} ticks")
    for k in range(scenario.ticks + 1):
        t = k * scenario.tick_s
        while taps and taps[0].time_s <= t:
            change = taps.popleft()
            net = net.with_tap(change.tap_ratio)
            logger.info(f"t={t:g} s: tap ratio set to {change.tap_ratio}")
            if scenario.rebuild_sensitivities_on_tap:
                model = _sensitivities(net, devices, services)
                gradients = {svc.id: model.rows_for(svc) for svc in services}
                logger.info("Rebuilt controller sensitivities after tap change")

        implemented = []
        injections: dict[int, complex] = {}
        for dev, ctrl in zip(devices, controllers):
            p, q = project(dev, ctrl.state.p, ctrl.state.q, ctrl.state, t)
            implemented.append(DeviceState(p=p, q=q, soc=ctrl.state.soc))
            injections[dev.bus] = injections.get(dev.bus, 0j) + complex(p, q) * base

        solution = solve_power_flow(net, injections, load_scale=setup.load.at(t))
        if not solution.converged:
            message = f"plant did not solve at t={t:g} s: {solution.diagnostic}"
            raise SimulationError(message, trajectory=recorder.build(k, message))

        signals: dict[str, Any] = {}
        for svc in services:
            scale = svc.unit_scale(base)
            g = measure(net, solution, svc)
            bounds = bounds_at(svc, t)
            result = coordinator_step(svc, duals[svc.id], g / scale, (bounds[0] / scale, bounds[1] / scale),
                                      gradients[svc.id], params, adaptive=adaptive)
            duals[svc.id] = result.dual
            signals[svc.id] = result.signal
            recorder.record_service(k, svc, g, bounds, result)

        for i, dev in enumerate(devices):
            per_service = {sid: sig.for_der(i) for sid, sig in signals.items()}
            controllers[i] = local_controller_step(dev, controllers[i].with_state(implemented[i]),
                                                   per_service, params, t, adaptive=adaptive)

        if scenario.check_invariants:
            check_invariants(t, devices, implemented, controllers, duals)
        recorder.record_devices(k, net.tap_ratio, implemented, controllers, t)

        for i, dev in enumerate(devices):
            if isinstance(dev.params, BatteryParams):
                soc = step_soc(implemented[i], dev.params, implemented[i].p)
                controllers[i] = controllers[i].with_state(replace(controllers[i].state, soc=soc))

    logger.info(f"Finished {scenario.name} ({scenario.mode})")
    return recorder.build(scenario.ticks + 1)


def has_undamped_oscillation(trajectory: Trajectory, *, window: float = 0.25,
                             flip_ratio: float = 0.5, min_step: float = 1e-6) -> bool:
    """True when some DER keeps reversing direction at the end of the run.

    Looks at the last ``window`` of the trajectory; movements smaller than
    ``min_step`` times the DER's largest injection are ignored.
    """
    start = int(len(trajectory) * (1.0 - window))
    for i in range(len(trajectory.der_ids)):
        p = trajectory.p_w[start:, i]
        threshold = min_step * max(float(np.nanmax(np.abs(trajectory.p_w[:, i]))), 1.0)
        moves = np.diff(p)
        moves = moves[np.abs(moves) > threshold]
        if moves.size < 4:
            continue
        flips = np.count_nonzero(np.diff(np.sign(moves))) / (moves.size - 1)
        if flips > flip_ratio:
            logger.debug(f"{trajectory.der_ids[i]} reverses on {flips:.0%} of moves")
            return True
    return False


def _decrement(step: float) -> float:
    """Lower the leading significant digit by one (0.8 -> 0.7, 1.0 -> 0.9)."""
    exponent = math.floor(math.log10(step))
    digit = math.floor(step / 10 ** exponent + 1e-9)
    if digit > 1:
        return round((digit - 1) * 10 ** exponent, 12)
    return round(9 * 10 ** (exponent - 1), 12)


def calibrate_manual_step(scenario: ScenarioConfig, *, start: float = 0.01,
                          horizon_s: float | None = None, max_doublings: int = 20) -> float:
    """Largest common step size without undamped oscillation.

    Doubles the common manual step size from ``start`` until some local
    controller oscillates, then lowers it one significant digit at a time until
    the oscillation is gone.
    """
    horizon = horizon_s or scenario.horizon_s
    data = scenario.model_dump()
    data.update(mode="manual", horizon_s=horizon, check_invariants=False,
                tap_schedule=[c for c in data["tap_schedule"] if c["time_s"] <= horizon])
    base = ScenarioConfig.model_validate(data)

    def oscillates(step: float) -> bool:
        trial = base.model_copy(update={"manual_step": step})
        try:
            return has_undamped_oscillation(run(trial))
        except SimulationError:
            return True

    step = start
    for _ in range(max_doublings):
        if oscillates(step):
            break
        logger.info(f"Manual step {step:g}: stable, doubling")
        step *= 2.0
    else:
        raise SimulationError(f"no oscillation found up to step size {step:g}")

    while step > start * 1e-3:
        step = _decrement(step)
        if not oscillates(step):
            logger.info(f"Calibrated manual step size: {step:g}")
            return step
    raise SimulationError("could not find a stable manual step size")
