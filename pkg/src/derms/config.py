"""
Scenario, network and instance configuration.

Files are YAML; values are validated with pydantic. Power quantities are SI
(W, var, Wh) and impedances are ohms. ``apply_overrides`` implements the CLI's
``--set key=value`` flags.
"""
from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Annotated, Any, Literal, Mapping, TypeVar, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from derms.control import AlgorithmParams
from derms.errors import ConfigError, OverrideError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BusConfig(_Strict):
    id: int
    load_p_w: float = 0.0
    load_q_var: float = 0.0


class LineConfig(_Strict):
    from_bus: int
    to_bus: int
    r_ohm: float = Field(ge=0)
    x_ohm: float


class NetworkConfig(_Strict):
    base_power_w: float = Field(gt=0)
    base_voltage_v: float = Field(gt=0)
    source_voltage_v: float = Field(gt=0)
    tap_ratio: float = Field(1.0, ge=0.9, le=1.1)
    head_bus: int = 0
    buses: list[BusConfig]
    lines: list[LineConfig]


class PvConfig(_Strict):
    kind: Literal["pv"] = "pv"
    id: str
    bus: int
    inverter_rating_w: float = Field(gt=0)
    # Multiplies the shared PV profile (fraction of rating) for this unit
    availability_scale: float = Field(1.0, ge=0)
    profile: str | None = Field(None, description="name of a profile in ScenarioConfig.profiles")


class BatteryConfig(_Strict):
    kind: Literal["battery"] = "battery"
    id: str
    bus: int
    capacity_wh: float = Field(gt=0)
    charge_limit_w: float = Field(ge=0)
    discharge_limit_w: float = Field(ge=0)
    initial_soc: float = Field(60.0, ge=0, le=100)
    preferred_soc: float = Field(60.0, ge=0, le=100)
    soc_min: float = Field(10.0, ge=0, le=100)
    soc_max: float = Field(90.0, ge=0, le=100)
    cost_weight: float = Field(0.01, ge=0)

    @model_validator(mode="after")
    def _soc_window(self) -> "BatteryConfig":
        if not self.soc_min <= self.initial_soc <= self.soc_max:
            raise ValueError(f"initial SOC {self.initial_soc} outside [{self.soc_min}, {self.soc_max}]")
        return self


DeviceConfig = Annotated[Union[PvConfig, BatteryConfig], Field(discriminator="kind")]

Scalar = Union[float, list[float]]


class BoundEntry(_Strict):
    """One step of a bound schedule: either lower/upper or set point/band."""

    time_s: float = Field(ge=0)
    lower: Scalar | None = None
    upper: Scalar | None = None
    set_point_w: Scalar | None = None
    band_w: Scalar | None = None

    @model_validator(mode="after")
    def _one_form(self) -> "BoundEntry":
        direct = self.lower is not None and self.upper is not None
        centred = self.set_point_w is not None and self.band_w is not None
        if direct == centred:
            raise ValueError("give exactly one of (lower, upper) or (set_point_w, band_w)")
        return self

    def resolved(self) -> tuple[Scalar, Scalar]:
        if self.lower is not None:
            return self.lower, self.upper
        centre, band = self.set_point_w, self.band_w
        if isinstance(centre, list) or isinstance(band, list):
            centre_list = centre if isinstance(centre, list) else None
            band_list = band if isinstance(band, list) else None
            n = len(centre_list or band_list)
            centre_list = centre_list or [centre] * n
            band_list = band_list or [band] * n
            return ([c - b for c, b in zip(centre_list, band_list)],
                    [c + b for c, b in zip(centre_list, band_list)])
        return centre - band, centre + band


class ServiceConfig(_Strict):
    id: str
    kind: Literal["voltage", "vpp"]
    # None: DER buses for voltage, the head bus for VPP
    measurements: list[int] | None = None
    schedule: list[BoundEntry] = Field(min_length=1)
    beta_init: float = Field(gt=0)
    decrease: float | None = Field(None, gt=0, lt=1)

    @field_validator("schedule")
    @classmethod
    def _ordered(cls, entries: list[BoundEntry]) -> list[BoundEntry]:
        times = [e.time_s for e in entries]
        if times != sorted(times) or len(set(times)) != len(times):
            raise ValueError("schedule entries must have strictly increasing times")
        return entries


class ProfileConfig(_Strict):
    kind: Literal["constant", "load", "clear-sky", "cloudy", "csv"]
    value: float = 1.0
    path: str | None = None
    noise: float = Field(0.0, ge=0)
    peak: float = Field(0.95, ge=0)
    start_hour: float = 10.0
    step_s: float | None = Field(None, gt=0)
    clouds_from_s: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _csv_path(self) -> "ProfileConfig":
        if self.kind == "csv" and not self.path:
            raise ValueError("csv profiles need a path")
        return self


class TapChange(_Strict):
    time_s: float = Field(ge=0)
    tap_ratio: float = Field(ge=0.9, le=1.1)


class ScenarioConfig(_Strict):
    name: str
    horizon_s: float = Field(gt=0)
    tick_s: float = Field(2.0, gt=0)
    seed: int = 0
    mode: Literal["adaptive", "manual"] = "adaptive"
    network: NetworkConfig | None = None
    network_file: str | None = None
    devices: list[DeviceConfig] = Field(min_length=1)
    services: list[ServiceConfig] = Field(min_length=1)
    # "load" multiplies nominal loads, "pv" is the PV fraction of rating
    profiles: dict[str, ProfileConfig] = Field(
        default_factory=lambda: {"load": ProfileConfig(kind="constant"),
                                 "pv": ProfileConfig(kind="constant")})
    tap_schedule: list[TapChange] = Field(default_factory=list)
    algorithm: AlgorithmParams = Field(default_factory=AlgorithmParams)
    alpha_init: float = Field(0.1, gt=0)
    manual_step: float | None = Field(None, gt=0)
    rebuild_sensitivities_on_tap: bool = False
    check_invariants: bool = True

    @model_validator(mode="after")
    def _consistent(self) -> "ScenarioConfig":
        ticks = self.horizon_s / self.tick_s
        if abs(ticks - round(ticks)) > 1e-9:
            raise ValueError(f"horizon {self.horizon_s} s is not a multiple of the tick {self.tick_s} s")
        if (self.network is None) == (self.network_file is None):
            raise ValueError("give exactly one of network or network_file")
        times = [c.time_s for c in self.tap_schedule]
        if times != sorted(times):
            raise ValueError("tap schedule must be time-ordered")
        if times and times[-1] > self.horizon_s:
            raise ValueError("tap change after the horizon")
        for label, ids in (("device", [d.id for d in self.devices]), ("service", [s.id for s in self.services])):
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {label} ids")
        for key in ("load", "pv"):
            if key not in self.profiles:
                raise ValueError(f"profiles must define '{key}'")
        for device in self.devices:
            if isinstance(device, PvConfig) and device.profile and device.profile not in self.profiles:
                raise ValueError(f"device {device.id} references unknown profile {device.profile}")
        return self

    @property
    def ticks(self) -> int:
        return int(round(self.horizon_s / self.tick_s))

    def with_mode(self, mode: str) -> "ScenarioConfig":
        return self.model_copy(update={"mode": mode})


class CentralDeviceConfig(_Strict):
    """Oracle device in per-unit: a PV unit or a battery at a fixed SOC."""

    kind: Literal["pv", "battery"]
    id: str
    inverter_rating: float | None = Field(None, gt=0)
    available: float | None = Field(None, ge=0)
    capacity: float | None = Field(None, gt=0)
    charge_limit: float | None = Field(None, ge=0)
    discharge_limit: float | None = Field(None, ge=0)
    dt_hours: float = Field(2.0 / 3600.0, gt=0)
    soc: float = 60.0
    preferred_soc: float = 60.0

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "CentralDeviceConfig":
        needed = (("inverter_rating", "available") if self.kind == "pv"
                  else ("capacity", "charge_limit", "discharge_limit"))
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} device {self.id} is missing {missing}")
        return self


class CentralInstanceConfig(_Strict):
    devices: list[CentralDeviceConfig] = Field(min_length=1, max_length=3)
    offset: list[float] = Field(min_length=1, max_length=4)
    dg_dp: list[list[float]]
    dg_dq: list[list[float]]
    lower: list[float]
    upper: list[float]
    nu: float = Field(1e-3, ge=0)
    epsilon: float = Field(1e-4, gt=0)


def parse_model(model: type[ModelT], data: Any, source: str = "<data>") -> ModelT:
    """Validate ``data`` against ``model``, raising ConfigError with every problem listed."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{source}: expected a mapping at the top level")
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors())
        raise ConfigError(f"{source}: {problems}") from exc


def read_yaml(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        try:
            return yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc


def load_scenario(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    """Read a scenario file. Relative file references resolve against its directory."""
    path = Path(path)
    data = read_yaml(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    scenario = parse_model(ScenarioConfig, _resolve_paths(data, path.parent), source=str(path))
    if overrides:
        scenario = override_scenario(scenario, overrides)
    logger.info(f"Loaded scenario {scenario.name} from {path}")
    return scenario


def _resolve_paths(data: dict, root: Path) -> dict:
    data = copy.deepcopy(data)
    if isinstance(data.get("network_file"), str):
        network_path = root / data["network_file"]
        data["network"] = read_yaml(network_path)
        data["network_file"] = None
    for profile in (data.get("profiles") or {}).values():
        if isinstance(profile, dict) and isinstance(profile.get("path"), str):
            profile["path"] = str(root / profile["path"])
    return data


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``key=value``; the value is read as a YAML scalar or flow collection."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise OverrideError(f"override '{text}' is not of the form key=value")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise OverrideError(f"cannot parse value of override '{text}': {exc}") from exc
    return key.strip(), value


def apply_overrides(data: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict:
    """Set dotted keys in a config mapping.

    List entries are addressed by their ``id`` (``services.vpp.decrease``).
    Only keys that already exist can be set, so apply overrides to a fully
    dumped model; the caller re-validates.
    """
    result = copy.deepcopy(dict(data))
    for key, value in overrides.items():
        parts = key.split(".")
        node: Any = result
        for part in parts[:-1]:
            node = _child(node, part, key)
        leaf = parts[-1]
        if isinstance(node, dict) and leaf in node:
            node[leaf] = value
        else:
            raise OverrideError(f"unknown override key '{key}'")
    return result


def _child(node: Any, part: str, key: str) -> Any:
    if isinstance(node, dict):
        if part in node and node[part] is not None:
            return node[part]
    elif isinstance(node, list):
        for item in node:
            if isinstance(item, dict) and str(item.get("id")) == part:
                return item
    raise OverrideError(f"unknown override key '{key}'")


def override_scenario(scenario: ScenarioConfig, overrides: Mapping[str, Any]) -> ScenarioConfig:
    """Apply dotted-key overrides to an in-memory scenario and re-validate."""
    data = scenario.model_dump(mode="json")
    return parse_model(ScenarioConfig, apply_overrides(data, overrides), source=scenario.name)
