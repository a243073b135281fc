"""
Single-phase-equivalent radial feeder: power flow and linear sensitivities.

Sign convention used across the package: a DER injection is positive into the
network, and feeder-head power is positive when the feeder imports from the
substation.

The solver is the branch-current/bus-voltage form of the backward/forward
sweep. With ``D[k, b] = 1`` when bus ``b`` sits in the subtree fed by the line
into bus ``k``, one sweep is

    backward:  J = -D @ conj(s / V)          (branch currents)
    forward:   V = V0 - D.T @ (z * J)        (bus voltages)

so the fixed point is ``V = V0 + M @ conj(s / V)`` with ``M = D.T diag(z) D``.
Sensitivities differentiate that fixed point exactly.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.linalg
import yaml

from derms.errors import (
    ConfigError,
    MeasurementError,
    ParameterError,
    SingularLinearizationError,
    TopologyError,
)

if TYPE_CHECKING:
    from derms.config import NetworkConfig
    from derms.services import GridService

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_SWEEPS = 100
DIVERGENCE_WINDOW = 10
TAP_RANGE = (0.9, 1.1)
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float


@dataclass(frozen=True)
class _Topology:
    index: dict[int, int]
    parent: np.ndarray
    downstream: np.ndarray
    z_pu: np.ndarray
    dlf: np.ndarray


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Radial feeder in SI units.

    Attributes:
        buses: Bus ids; the order fixes the layout of every per-bus vector.
        loads: Nominal (P watts, Q vars) consumption per bus. Missing buses carry
            no load.
        lines: Series impedances forming a tree rooted at ``head_bus``.
        source_voltage_v: Slack voltage magnitude before the tap.
        tap_ratio: Load tap changer multiplier on the source voltage.
        base_power_w: Per-unit power base.
        base_voltage_v: Per-unit voltage base.
        head_bus: Root of the tree, where the substation connects.
    """

    buses: tuple[int, ...]
    lines: tuple[Line, ...]
    loads: Mapping[int, tuple[float, float]] = field(default_factory=dict)
    source_voltage_v: float = 1.0
    tap_ratio: float = 1.0
    base_power_w: float = 1.0
    base_voltage_v: float = 1.0
    head_bus: int = 0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(int(b) for b in self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "loads", dict(self.loads))
        if self.base_power_w <= 0 or self.base_voltage_v <= 0 or self.source_voltage_v <= 0:
            raise ParameterError("base quantities and source voltage must be positive")
        if not TAP_RANGE[0] <= self.tap_ratio <= TAP_RANGE[1]:
            raise ParameterError(f"tap ratio {self.tap_ratio} outside {TAP_RANGE}")
        for line in self.lines:
            if line.r_ohm < 0:
                raise ParameterError(f"negative resistance on line {line.from_bus}-{line.to_bus}")
            if not np.isfinite(line.x_ohm):
                raise ParameterError(f"reactance on line {line.from_bus}-{line.to_bus} is not finite")
        unknown = set(self.loads) - set(self.buses)
        if unknown:
            raise TopologyError(f"loads reference unknown buses {sorted(unknown)}")
        # Validates the tree eagerly
        _ = self.topology

    @classmethod
    def from_config(cls, cfg: "NetworkConfig") -> "NetworkModel":
        return cls(
            buses=tuple(b.id for b in cfg.buses),
            lines=tuple(Line(l.from_bus, l.to_bus, l.r_ohm, l.x_ohm) for l in cfg.lines),
            loads={b.id: (b.load_p_w, b.load_q_var) for b in cfg.buses},
            source_voltage_v=cfg.source_voltage_v,
            tap_ratio=cfg.tap_ratio,
            base_power_w=cfg.base_power_w,
            base_voltage_v=cfg.base_voltage_v,
            head_bus=cfg.head_bus,
        )

    def with_tap(self, ratio: float) -> "NetworkModel":
        return replace(self, tap_ratio=float(ratio))

    def scaled_impedances(self, factor: float) -> "NetworkModel":
        lines = tuple(replace(l, r_ohm=l.r_ohm * factor, x_ohm=l.x_ohm * factor) for l in self.lines)
        return replace(self, lines=lines)

    @property
    def base_impedance_ohm(self) -> float:
        return self.base_voltage_v ** 2 / self.base_power_w

    @property
    def head_voltage_pu(self) -> float:
        return self.tap_ratio * self.source_voltage_v / self.base_voltage_v

    def index_of(self, bus: int) -> int:
        try:
            return self.topology.index[bus]
        except KeyError:
            raise MeasurementError(f"unknown bus {bus}") from None

    def subtree(self, bus: int) -> list[int]:
        """Buses fed through ``bus`` (``bus`` included)."""
        row = self.topology.downstream[self.index_of(bus)]
        return [b for b, inside in zip(self.buses, row) if inside]

    def group_roots(self) -> list[int]:
        """Buses directly connected to the head, one per feeder group."""
        head = self.index_of(self.head_bus)
        return [b for b, p in zip(self.buses, self.topology.parent) if p == head]

    def load_vector_pu(self, load_scale: float = 1.0) -> np.ndarray:
        loads = np.zeros(len(self.buses), dtype=complex)
        for bus, (p, q) in self.loads.items():
            loads[self.index_of(bus)] = complex(p, q)
        return loads * load_scale / self.base_power_w

    def injection_vector_pu(self, injections: Mapping[int, complex] | None) -> np.ndarray:
        vector = np.zeros(len(self.buses), dtype=complex)
        for bus, value in (injections or {}).items():
            if bus not in self.topology.index:
                raise TopologyError(f"injection at unknown bus {bus}")
            vector[self.topology.index[bus]] += complex(value)
        return vector / self.base_power_w

    @cached_property
    def topology(self) -> _Topology:
        return _build_topology(self)


def _build_topology(net: NetworkModel) -> _Topology:
    n = len(net.buses)
    index = {bus: i for i, bus in enumerate(net.buses)}
    if len(index) != n:
        raise TopologyError("duplicate bus ids")
    if net.head_bus not in index:
        raise TopologyError(f"head bus {net.head_bus} is not a bus")
    if len(net.lines) != n - 1:
        raise TopologyError(f"a radial feeder with {n} buses needs {n - 1} lines, got {len(net.lines)}")

    neighbours: dict[int, list[tuple[int, Line]]] = {i: [] for i in range(n)}
    for line in net.lines:
        if line.from_bus not in index or line.to_bus not in index:
            raise TopologyError(f"line {line.from_bus}-{line.to_bus} references an unknown bus")
        if line.from_bus == line.to_bus:
            raise TopologyError(f"line {line.from_bus}-{line.to_bus} is a self loop")
        a, b = index[line.from_bus], index[line.to_bus]
        neighbours[a].append((b, line))
        neighbours[b].append((a, line))

    z_base = net.base_impedance_ohm
    root = index[net.head_bus]
    parent = np.full(n, -1, dtype=int)
    z_pu = np.zeros(n, dtype=complex)
    order = [root]
    seen = {root}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for child, line in neighbours[node]:
            if child in seen:
                continue
            seen.add(child)
            parent[child] = node
            z_pu[child] = complex(line.r_ohm, line.x_ohm) / z_base
            order.append(child)
            queue.append(child)
    if len(seen) != n:
        missing = sorted(net.buses[i] for i in set(range(n)) - seen)
        raise TopologyError(f"buses {missing} are not connected to the head")

    downstream = np.zeros((n, n), dtype=bool)
    for node in reversed(order):
        downstream[node, node] = True
        if parent[node] >= 0:
            downstream[parent[node]] |= downstream[node]

    d = downstream.astype(float)
    dlf = d.T @ (z_pu[:, None] * d)
    return _Topology(index=index, parent=parent, downstream=downstream, z_pu=z_pu, dlf=dlf)


def load_network(path: str | Path) -> NetworkModel:
    """Read a YAML network description (SI units)."""
    from derms.config import NetworkConfig, parse_model

    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return NetworkModel.from_config(parse_model(NetworkConfig, data, source=str(path)))


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Result of one power-flow solve, per-unit internally.

    ``voltages``, ``injections`` (net of load) and ``branch_currents`` follow the
    order of ``NetworkModel.buses``. ``branch_currents[k]`` flows from the parent
    of ``k`` into ``k``; at the head it is the feeder import current.
    """

    voltages: np.ndarray
    injections: np.ndarray
    branch_currents: np.ndarray
    head_index: int
    base_power_w: float
    converged: bool
    residual: float
    sweeps: int
    losses_pu: float
    diagnostic: str | None = None

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def head_power_pu(self) -> complex:
        h = self.head_index
        return complex(self.voltages[h] * np.conj(self.branch_currents[h]))

    @property
    def head_power_w(self) -> float:
        return self.head_power_pu.real * self.base_power_w

    def balance_mismatch_pu(self) -> float:
        """|head import - (load - injection + losses)| for active power."""
        return abs(self.head_power_pu.real - (-self.injections.real.sum() + self.losses_pu))


def solve_power_flow(net: NetworkModel, injections: Mapping[int, complex] | None = None, *,
                     load_scale: float = 1.0, tolerance: float = DEFAULT_TOLERANCE,
                     max_sweeps: int = DEFAULT_MAX_SWEEPS) -> PowerFlowSolution:
    """Solve the nonlinear power flow by backward/forward sweep.

    Args:
        net: Feeder model.
        injections: DER injections per bus, ``P + jQ`` in watts/vars.
        load_scale: Multiplier on every nominal load.
        tolerance: Stop once the largest voltage update is below this (p.u.).
        max_sweeps: Iteration cap.

    Returns:
        The solution. Non-convergence and divergence come back as
        ``converged=False`` with a ``diagnostic``; they are never raised here.
    """
    topo = net.topology
    s = net.injection_vector_pu(injections) - net.load_vector_pu(load_scale)
    v0 = complex(net.head_voltage_pu)
    d = topo.downstream.astype(float)

    v = np.full(len(net.buses), v0, dtype=complex)
    residual = np.inf
    previous = np.inf
    growth = 0
    converged = False
    diagnostic = None
    sweeps = 0
    with np.errstate(all="ignore"):
        for sweeps in range(1, max_sweeps + 1):
            currents = -d @ np.conj(s / v)
            v_new = v0 - d.T @ (topo.z_pu * currents)
            residual = float(np.max(np.abs(v_new - v)))
            v = v_new
            if not np.isfinite(residual):
                diagnostic = f"non-finite voltages after {sweeps} sweeps"
                break
            if residual < tolerance:
                converged = True
                break
            growth = growth + 1 if residual > previous else 0
            previous = residual
            if growth >= DIVERGENCE_WINDOW:
                diagnostic = (f"residual grew for {DIVERGENCE_WINDOW} consecutive sweeps "
                              f"(last {residual:.3e})")
                break
        else:
            diagnostic = f"no convergence after {max_sweeps} sweeps (residual {residual:.3e})"
        currents = -d @ np.conj(s / v)

    if diagnostic:
        logger.warning(f"Power flow failed: {diagnostic}")
    else:
        logger.debug(f"Power flow converged in {sweeps} sweeps, residual {residual:.3e}")
    return PowerFlowSolution(
        voltages=v,
        injections=s,
        branch_currents=currents,
        head_index=topo.index[net.head_bus],
        base_power_w=net.base_power_w,
        converged=converged,
        residual=residual,
        sweeps=sweeps,
        losses_pu=float(np.sum(topo.z_pu.real * np.abs(currents) ** 2)),
        diagnostic=diagnostic,
    )


def group_power_pu(net: NetworkModel, solution: PowerFlowSolution, group: int) -> complex:
    """Complex power entering the subtree rooted at ``group``.

    For the head bus this is the whole feeder import.
    """
    topo = net.topology
    gi = net.index_of(group)
    parent = topo.parent[gi] if topo.parent[gi] >= 0 else gi
    return complex(solution.voltages[parent] * np.conj(solution.branch_currents[gi]))


def measure(net: NetworkModel, solution: PowerFlowSolution, service: "GridService") -> np.ndarray:
    """Measurement vector of a grid service in SI units.

    Voltage services read magnitudes (p.u.) at their buses; VPP services read
    the active power (W) entering each configured group.
    """
    from derms.services import ServiceKind

    if not solution.converged:
        raise MeasurementError(f"cannot measure an unconverged solution: {solution.diagnostic}")
    if service.kind is ServiceKind.VOLTAGE:
        return np.array([abs(solution.voltages[net.index_of(b)]) for b in service.measurement_ids])
    return np.array([group_power_pu(net, solution, g).real * net.base_power_w
                     for g in service.measurement_ids])


class ServiceGradients(NamedTuple):
    """dG/dP and dG/dQ rows for one service, per-unit per per-unit."""

    dp: np.ndarray
    dq: np.ndarray


@dataclass(frozen=True, eq=False)
class SensitivityModel:
    """Linearized measurement model used by the coordinator.

    Columns follow ``der_buses`` (one column per DER, buses may repeat). Rows of
    the voltage matrices follow ``measured_buses``; rows of the head-power
    matrices follow ``head_groups``. All entries are per-unit per per-unit.
    """

    measured_buses: tuple[int, ...]
    der_buses: tuple[int, ...]
    head_groups: tuple[int, ...]
    dvmag_dp: np.ndarray
    dvmag_dq: np.ndarray
    dphead_dp: np.ndarray
    dphead_dq: np.ndarray
    linearization_point: np.ndarray
    voltages: np.ndarray

    def rows_for(self, service: "GridService") -> ServiceGradients:
        from derms.services import ServiceKind

        if service.kind is ServiceKind.VOLTAGE:
            keys, dp, dq = self.measured_buses, self.dvmag_dp, self.dvmag_dq
        else:
            keys, dp, dq = self.head_groups, self.dphead_dp, self.dphead_dq
        rows = []
        for mid in service.measurement_ids:
            if mid not in keys:
                raise MeasurementError(f"service {service.id}: no sensitivity row for measurement {mid}")
            rows.append(keys.index(mid))
        return ServiceGradients(dp[rows], dq[rows])


def build_sensitivities(net: NetworkModel, measured_buses: Sequence[int], der_buses: Sequence[int],
                        head_groups: Iterable[int] | None = None, *,
                        injections: Mapping[int, complex] | None = None) -> SensitivityModel:
    """Linearize voltage magnitudes and group powers around an operating point.

    The operating point is the power flow at nominal loads with ``injections``
    (none by default). The returned matrices are the exact derivatives of the
    sweep fixed point there.

    Raises:
        ParameterError: A bus list is empty.
        MeasurementError: A bus is not in the network.
        SingularLinearizationError: The operating point does not solve or its
            Jacobian is singular.
    """
    measured_buses = tuple(int(b) for b in measured_buses)
    der_buses = tuple(int(b) for b in der_buses)
    head_groups = tuple(int(g) for g in head_groups) if head_groups else (net.head_bus,)
    if not measured_buses or not der_buses:
        raise ParameterError("measured and DER bus lists must be non-empty")

    solution = solve_power_flow(net, injections)
    if not solution.converged:
        raise SingularLinearizationError(f"linearization point did not solve: {solution.diagnostic}")

    topo = net.topology
    v, s = solution.voltages, solution.injections
    n = len(v)
    coupling = topo.dlf * (np.conj(s) / np.conj(v) ** 2)[None, :]
    eye = np.eye(n)
    system = np.block([[eye + coupling.real, coupling.imag],
                       [coupling.imag, eye - coupling.real]])
    condition = np.linalg.cond(system)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularLinearizationError(f"power-flow Jacobian is singular (condition {condition:.3e})")

    cols = [net.index_of(b) for b in der_buses]
    k = len(cols)
    base = topo.dlf[:, cols] / np.conj(v[cols])[None, :]
    rhs = np.hstack([base, -1j * base])
    try:
        stacked = scipy.linalg.solve(system, np.vstack([rhs.real, rhs.imag]))
    except scipy.linalg.LinAlgError as exc:
        raise SingularLinearizationError(f"power-flow Jacobian is singular: {exc}") from exc
    dv = stacked[:n] + 1j * stacked[n:]
    dvmag = (np.conj(v)[:, None] * dv).real / np.abs(v)[:, None]

    rows = [net.index_of(b) for b in measured_buses]

    ds = np.zeros((n, 2 * k), dtype=complex)
    for col, bus_index in enumerate(cols):
        ds[bus_index, col] = 1.0
        ds[bus_index, k + col] = 1j
    head_rows = []
    for group in head_groups:
        gi = net.index_of(group)
        parent = topo.parent[gi] if topo.parent[gi] >= 0 else gi
        members = topo.downstream[gi]
        vm = v[members]
        flow = np.sum(s[members] / vm)
        dflow = np.sum(ds[members] / vm[:, None] - (s[members] / vm ** 2)[:, None] * dv[members], axis=0)
        head_rows.append(-(dv[parent] * flow + v[parent] * dflow).real)
    head = np.array(head_rows)

    logger.debug(f"Built sensitivities for {len(rows)} buses, {len(head_groups)} groups, {k} DERs "
                 f"(condition {condition:.2e})")
    return SensitivityModel(
        measured_buses=measured_buses,
        der_buses=der_buses,
        head_groups=head_groups,
        dvmag_dp=dvmag[rows, :k],
        dvmag_dq=dvmag[rows, k:],
        dphead_dp=head[:, :k],
        dphead_dq=head[:, k:],
        linearization_point=s,
        voltages=v,
    )
