"""
Built-in desk-scale scenarios on a synthetic 12-bus feeder.

The feeder has three groups hanging off the head (buses 1-4, 5-7 and 8-11),
six PV units at the group ends and three batteries sharing their buses.
Impedances are sized so that full PV output lifts the far buses by roughly
0.05 p.u., which makes the 1.03 p.u. limit bind around midday.
"""
from __future__ import annotations

from derms.config import (
    BatteryConfig,
    BoundEntry,
    BusConfig,
    LineConfig,
    NetworkConfig,
    ProfileConfig,
    PvConfig,
    ScenarioConfig,
    ServiceConfig,
    TapChange,
)
from derms.control import AlgorithmParams

BASE_POWER_W = 1e6
BASE_VOLTAGE_V = 7200.0
NOMINAL_TAP = 1.02

BASELINE_ALPHA = 0.1
BASELINE_BETA = {"voltage": 20.0, "vpp": 1.0}
# Common manual step size; re-derive with calibrate_manual_step when the feeder or fleet changes
MANUAL_STEP = 0.4

VOLTAGE_BAND = (0.95, 1.03)
VPP_BAND_W = 10e3
VPP_GROUPS = [1, 5, 8]
VPP_SET_POINTS_W = [-20e3, -10e3, -20e3]

# Keeps the upper voltage limit active all through the self-tuning runs
SELFTUNE_TAP = 1.03
SELFTUNE_VOLTAGE_DECREASE = 0.9

# (from, to, r p.u., x p.u.)
_LINES_PU = [
    (0, 1, 0.08, 0.06), (1, 2, 0.10, 0.08), (2, 3, 0.12, 0.08), (2, 4, 0.12, 0.10),
    (0, 5, 0.10, 0.08), (5, 6, 0.12, 0.10), (6, 7, 0.14, 0.10),
    (0, 8, 0.08, 0.06), (8, 9, 0.10, 0.08), (9, 10, 0.12, 0.10), (9, 11, 0.12, 0.08),
]
_LOADS_PU = {
    1: (0.03, 0.010), 2: (0.02, 0.007), 3: (0.02, 0.007), 4: (0.02, 0.007),
    5: (0.03, 0.010), 6: (0.03, 0.010), 7: (0.02, 0.007),
    8: (0.03, 0.010), 9: (0.02, 0.007), 10: (0.02, 0.007), 11: (0.02, 0.007),
}
_PV_RATINGS_W = {"pv3": (3, 100e3), "pv4": (4, 80e3), "pv6": (6, 80e3),
                 "pv7": (7, 100e3), "pv10": (10, 100e3), "pv11": (11, 80e3)}
_BATTERY_BUSES = {"bat3": 3, "bat7": 7, "bat10": 10}


def synthetic_feeder(tap_ratio: float = NOMINAL_TAP) -> NetworkConfig:
    z_base = BASE_VOLTAGE_V ** 2 / BASE_POWER_W
    return NetworkConfig(
        base_power_w=BASE_POWER_W,
        base_voltage_v=BASE_VOLTAGE_V,
        source_voltage_v=BASE_VOLTAGE_V,
        tap_ratio=tap_ratio,
        head_bus=0,
        buses=[BusConfig(id=0)] + [
            BusConfig(id=bus, load_p_w=p * BASE_POWER_W, load_q_var=q * BASE_POWER_W)
            for bus, (p, q) in _LOADS_PU.items()
        ],
        lines=[LineConfig(from_bus=a, to_bus=b, r_ohm=r * z_base, x_ohm=x * z_base)
               for a, b, r, x in _LINES_PU],
    )


def synthetic_fleet(batteries: bool = True) -> list[PvConfig | BatteryConfig]:
    pv = [PvConfig(id=name, bus=bus, inverter_rating_w=rating)
          for name, (bus, rating) in _PV_RATINGS_W.items()]
    if not batteries:
        return pv
    return pv + [BatteryConfig(id=name, bus=bus, capacity_wh=200e3,
                               charge_limit_w=50e3, discharge_limit_w=50e3)
                 for name, bus in _BATTERY_BUSES.items()]


def voltage_service(beta: float = BASELINE_BETA["voltage"], decrease: float | None = None) -> ServiceConfig:
    return ServiceConfig(
        id="voltage", kind="voltage", beta_init=beta, decrease=decrease,
        schedule=[BoundEntry(time_s=0.0, lower=VOLTAGE_BAND[0], upper=VOLTAGE_BAND[1])],
    )


def vpp_service(steps: list[tuple[float, list[float]]] | None = None, *, beta: float = BASELINE_BETA["vpp"],
                band_w: float = VPP_BAND_W, decrease: float | None = None) -> ServiceConfig:
    steps = steps or [(0.0, VPP_SET_POINTS_W)]
    return ServiceConfig(
        id="vpp", kind="vpp", measurements=VPP_GROUPS, beta_init=beta, decrease=decrease,
        schedule=[BoundEntry(time_s=t, set_point_w=list(points), band_w=band_w) for t, points in steps],
    )


def _scenario(name: str, *, horizon_s: float, pv: ProfileConfig, services: list[ServiceConfig],
              step_scale: float = 1.0, start_hour: float = 10.0, tap_ratio: float = NOMINAL_TAP,
              tap_schedule: list[TapChange] | None = None, algorithm: AlgorithmParams | None = None,
              devices: list[PvConfig | BatteryConfig] | None = None) -> ScenarioConfig:
    services = [svc.model_copy(update={"beta_init": svc.beta_init * step_scale}) for svc in services]
    return ScenarioConfig(
        name=name,
        horizon_s=horizon_s,
        network=synthetic_feeder(tap_ratio),
        devices=devices or synthetic_fleet(),
        services=services,
        profiles={"load": ProfileConfig(kind="load", noise=0.03, start_hour=start_hour), "pv": pv},
        tap_schedule=tap_schedule or [],
        algorithm=algorithm or AlgorithmParams(),
        alpha_init=BASELINE_ALPHA * step_scale,
        manual_step=MANUAL_STEP,
    )


def _pair(scenario: ScenarioConfig) -> dict[str, ScenarioConfig]:
    return {"adaptive": scenario, "manual": scenario.with_mode("manual")}


def selftune(label: str, step_scale: float) -> ScenarioConfig:
    """
    PV-only fleet with both services persistently active.

    Every service decreases faster than the PV units (0.9 and 0.5 against
    0.95), so each step size settles at its own stability edge instead of
    trading size with a neighbour. Batteries are left out because a
    saturated unit freezes its step size wherever it happens to be.
    """
    return _scenario(
        f"selftune-{label}",
        horizon_s=7200.0,
        pv=ProfileConfig(kind="clear-sky", noise=0.01, start_hour=10.0),
        services=[voltage_service(decrease=SELFTUNE_VOLTAGE_DECREASE), vpp_service()],
        step_scale=step_scale,
        tap_ratio=SELFTUNE_TAP,
        devices=synthetic_fleet(batteries=False),
    )


def vpp_step() -> ScenarioConfig:
    # Group set points move at 1800 s, then partly back at 4500 s
    first = [p + d for p, d in zip(VPP_SET_POINTS_W, [26e3, -30e3, -34e3])]
    second = [p + d for p, d in zip(first, [-13e3, 15e3, 17e3])]
    return _scenario(
        "vpp-step",
        horizon_s=5400.0,
        pv=ProfileConfig(kind="clear-sky", noise=0.01, start_hour=11.0),
        services=[voltage_service(), vpp_service([(0.0, VPP_SET_POINTS_W), (1800.0, first), (4500.0, second)])],
        start_hour=11.0,
    )


def pv_fluctuation() -> ScenarioConfig:
    return _scenario(
        "pv-fluctuation",
        horizon_s=3600.0,
        pv=ProfileConfig(kind="cloudy", noise=0.01, start_hour=12.0, clouds_from_s=600.0),
        services=[voltage_service(), vpp_service(decrease=0.995)],
        start_hour=12.0,
        algorithm=AlgorithmParams(gamma_down_der=0.8),
    )


def tap_change() -> ScenarioConfig:
    return _scenario(
        "tap-change",
        horizon_s=5400.0,
        pv=ProfileConfig(kind="clear-sky", noise=0.01, start_hour=10.0),
        services=[voltage_service(), vpp_service()],
        # Both steps stay within what reactive power can correct
        tap_schedule=[TapChange(time_s=1800.0, tap_ratio=0.94), TapChange(time_s=3600.0, tap_ratio=1.035)],
    )


def priority_conflict(voltage_decrease: float = 0.9, vpp_decrease: float = 0.9) -> ScenarioConfig:
    """VPP asks for more export than the voltage limit allows."""
    return _scenario(
        "priority-conflict",
        horizon_s=3600.0,
        pv=ProfileConfig(kind="clear-sky", noise=0.0, start_hour=11.5),
        services=[voltage_service(decrease=voltage_decrease),
                  vpp_service([(0.0, [-80e3, -80e3, -80e3])], band_w=5e3, decrease=vpp_decrease)],
        start_hour=11.5,
        tap_ratio=1.03,
    )


def builtin_scenarios() -> dict[str, dict[str, ScenarioConfig]]:
    """Catalog of built-in scenarios, each with an adaptive and a manual variant."""
    scenarios = [
        selftune("base", 1.0),
        selftune("low", 0.01),
        selftune("high", 100.0),
        vpp_step(),
        pv_fluctuation(),
        tap_change(),
        priority_conflict(),
    ]
    return {s.name: _pair(s) for s in scenarios}
