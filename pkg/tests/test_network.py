"""Tests for derms.network module."""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from derms.errors import MeasurementError, ParameterError, SingularLinearizationError, TopologyError
from derms.network import (
    Line,
    NetworkModel,
    build_sensitivities,
    group_power_pu,
    load_network,
    measure,
    solve_power_flow,
)
from derms.scenarios import synthetic_feeder
from derms.services import BoundSchedule, GridService, ServiceKind

TEST_DATA = Path(__file__).parent.parent / "test_data"
DER_BUSES = [3, 4, 6, 7, 10, 11]


def two_bus(r=0.01, x=0.01, load=(0.1, 0.0), tap=1.0):
    """Two-bus feeder in per-unit (all bases 1)."""
    loads = {1: load} if load is not None else {}
    return NetworkModel(buses=(0, 1), lines=(Line(0, 1, r, x),), loads=loads, tap_ratio=tap)


def service(kind, ids):
    return GridService(id="svc", kind=kind, measurement_ids=tuple(ids),
                       schedule=BoundSchedule.constant(0.0, 2.0), beta_init=1.0,
                       decrease=0.5, horizon_s=3600.0)


@pytest.fixture
def feeder():
    return NetworkModel.from_config(synthetic_feeder())


class TestTopology:
    def test_synthetic_feeder_is_a_tree(self, feeder):
        assert len(feeder.buses) == 12
        assert feeder.group_roots() == [1, 5, 8]
        assert sorted(feeder.subtree(5)) == [5, 6, 7]

    def test_wrong_line_count(self):
        with pytest.raises(TopologyError, match="needs 2 lines"):
            NetworkModel(buses=(0, 1, 2), lines=(Line(0, 1, 0.1, 0.1),))

    def test_cycle_leaves_a_bus_disconnected(self):
        # Three lines on four buses with a loop between 0, 1 and 2
        lines = (Line(0, 1, 0.1, 0.1), Line(1, 2, 0.1, 0.1), Line(2, 0, 0.1, 0.1))
        with pytest.raises(TopologyError, match="not connected"):
            NetworkModel(buses=(0, 1, 2, 3), lines=lines)

    def test_unknown_bus_in_line(self):
        with pytest.raises(TopologyError):
            NetworkModel(buses=(0, 1), lines=(Line(0, 7, 0.1, 0.1),))

    def test_duplicate_bus(self):
        with pytest.raises(TopologyError, match="duplicate"):
            NetworkModel(buses=(0, 0), lines=(Line(0, 0, 0.1, 0.1),))

    def test_negative_resistance(self):
        with pytest.raises(ParameterError):
            two_bus(r=-0.01)

    @pytest.mark.parametrize("tap", [0.89, 1.11])
    def test_tap_out_of_range(self, feeder, tap):
        with pytest.raises(ParameterError):
            feeder.with_tap(tap)

    def test_load_network_file(self):
        net = load_network(TEST_DATA / "network.yaml")
        assert net.buses == (0, 1, 2, 3)
        assert net.loads[1] == (30000.0, 10000.0)
        assert net.head_voltage_pu == pytest.approx(1.0)


class TestPowerFlow:
    def test_lossless_no_load_identity(self):
        net = two_bus(r=0.0, x=0.0, load=None)
        sol = solve_power_flow(net)
        assert sol.converged
        np.testing.assert_allclose(sol.magnitudes, [1.0, 1.0])
        assert sol.head_power_w == pytest.approx(0.0, abs=1e-12)

    def test_two_bus_closed_form(self):
        r, x, p, q = 0.01, 0.01, 0.1, 0.0
        sol = solve_power_flow(two_bus(r, x, (p, q)), tolerance=1e-12)
        a = 1.0 - 2.0 * (r * p + x * q)
        v2_squared = (a + math.sqrt(a * a - 4.0 * (r * r + x * x) * (p * p + q * q))) / 2.0
        assert sol.converged
        assert sol.magnitudes[1] == pytest.approx(math.sqrt(v2_squared), abs=1e-8)

    def test_residual_below_tolerance(self, feeder):
        sol = solve_power_flow(feeder)
        assert sol.converged
        assert sol.residual < 1e-8

    def test_power_balance_random_injections(self, feeder):
        rng = np.random.default_rng(7)
        for _ in range(100):
            injections = {bus: complex(rng.uniform(0.0, 100e3), rng.uniform(-50e3, 50e3)) for bus in DER_BUSES}
            sol = solve_power_flow(feeder, injections, load_scale=rng.uniform(0.5, 1.2))
            assert sol.converged
            assert sol.balance_mismatch_pu() < 1e-7

    def test_tap_raise_increases_every_voltage(self, feeder):
        low = solve_power_flow(feeder.with_tap(1.0))
        high = solve_power_flow(feeder.with_tap(1.05))
        assert np.all(high.magnitudes > low.magnitudes)

    def test_divergence_is_reported_not_raised(self):
        # Far beyond the maximum loadability of the line
        sol = solve_power_flow(two_bus(r=0.5, x=0.5, load=(5.0, 5.0)))
        assert not sol.converged
        assert sol.diagnostic

    def test_iteration_cap(self, feeder):
        sol = solve_power_flow(feeder, max_sweeps=1)
        assert not sol.converged
        assert "1 sweeps" in sol.diagnostic

    def test_injection_at_unknown_bus(self, feeder):
        with pytest.raises(TopologyError):
            solve_power_flow(feeder, {99: 1e3})

    def test_head_group_power_is_feeder_import(self, feeder):
        sol = solve_power_flow(feeder)
        assert group_power_pu(feeder, sol, 0) == pytest.approx(sol.head_power_pu)
        groups = sum(group_power_pu(feeder, sol, g) for g in feeder.group_roots())
        assert groups.real == pytest.approx(sol.head_power_pu.real, abs=1e-12)


class TestMeasure:
    def test_flat_no_load_voltages(self):
        net = two_bus(load=None)
        sol = solve_power_flow(net)
        np.testing.assert_allclose(measure(net, sol, service(ServiceKind.VOLTAGE, [0, 1])), [1.0, 1.0])

    def test_vpp_no_load_no_der(self):
        net = two_bus(load=None)
        sol = solve_power_flow(net)
        assert measure(net, sol, service(ServiceKind.VPP, [0]))[0] == pytest.approx(0.0, abs=1e-12)

    def test_vpp_load_plus_losses(self):
        net = two_bus(r=0.05, x=0.05, load=(0.1, 0.0))
        sol = solve_power_flow(net)
        g = measure(net, sol, service(ServiceKind.VPP, [0]))[0]
        assert g > 0.1
        assert g == pytest.approx(0.1 + sol.losses_pu, abs=1e-8)

    def test_unknown_measurement(self):
        net = two_bus()
        sol = solve_power_flow(net)
        with pytest.raises(MeasurementError):
            measure(net, sol, service(ServiceKind.VOLTAGE, [5]))

    def test_unconverged_solution(self):
        net = two_bus()
        sol = solve_power_flow(net, max_sweeps=1)
        with pytest.raises(MeasurementError):
            measure(net, sol, service(ServiceKind.VOLTAGE, [1]))


class TestSensitivities:
    def test_dimensions(self, feeder):
        model = build_sensitivities(feeder, DER_BUSES[:4], DER_BUSES, [1, 5, 8])
        assert model.dvmag_dp.shape == (4, 6)
        assert model.dvmag_dq.shape == (4, 6)
        assert model.dphead_dp.shape == (3, 6)
        assert model.head_groups == (1, 5, 8)

    def test_default_head_group(self, feeder):
        model = build_sensitivities(feeder, DER_BUSES, DER_BUSES)
        assert model.head_groups == (0,)
        assert model.dphead_dp.shape == (1, 6)

    def test_two_bus_matches_resistance(self):
        net = two_bus(r=0.01, x=0.01, load=None)
        model = build_sensitivities(net, [1], [1])
        assert model.dvmag_dp[0, 0] == pytest.approx(0.01, rel=0.2)

    def test_der_at_head_moves_head_power_one_for_one(self, feeder):
        model = build_sensitivities(feeder, [3], [0])
        assert model.dphead_dp[0, 0] == pytest.approx(-1.0, abs=1e-12)
        assert model.dvmag_dp[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_head_power_sensitivity_range(self, feeder):
        model = build_sensitivities(feeder, DER_BUSES, DER_BUSES)
        assert np.all(model.dphead_dp >= -1.05)
        assert np.all(model.dphead_dp <= -0.90)

    def test_matches_finite_differences(self, feeder):
        groups = [0, 1, 5, 8]
        model = build_sensitivities(feeder, DER_BUSES, DER_BUSES, groups)
        h = 1e-4
        base = feeder.base_power_w

        def observe(bus, delta):
            sol = solve_power_flow(feeder, {bus: delta * base}, tolerance=1e-12)
            voltages = np.array([sol.magnitudes[feeder.index_of(b)] for b in DER_BUSES])
            heads = np.array([group_power_pu(feeder, sol, g).real for g in groups])
            return voltages, heads

        for col, bus in enumerate(DER_BUSES):
            for kind, unit, dv_model, dh_model in (("P", 1.0, model.dvmag_dp, model.dphead_dp),
                                                   ("Q", 1j, model.dvmag_dq, model.dphead_dq)):
                v_plus, h_plus = observe(bus, h * unit)
                v_minus, h_minus = observe(bus, -h * unit)
                np.testing.assert_allclose(dv_model[:, col], (v_plus - v_minus) / (2 * h),
                                           rtol=0.05, atol=1e-6, err_msg=f"dV/d{kind} at bus {bus}")
                np.testing.assert_allclose(dh_model[:, col], (h_plus - h_minus) / (2 * h),
                                           rtol=0.05, atol=1e-6, err_msg=f"dPhead/d{kind} at bus {bus}")

    def test_doubling_impedances_doubles_voltage_sensitivity(self):
        net = NetworkModel.from_config(synthetic_feeder())
        unloaded = NetworkModel(buses=net.buses, lines=net.lines, source_voltage_v=net.source_voltage_v,
                                tap_ratio=net.tap_ratio, base_power_w=net.base_power_w,
                                base_voltage_v=net.base_voltage_v)
        single = build_sensitivities(unloaded, DER_BUSES, DER_BUSES).dvmag_dp
        double = build_sensitivities(unloaded.scaled_impedances(2.0), DER_BUSES, DER_BUSES).dvmag_dp
        assert np.all(np.abs(double) >= 2.0 * np.abs(single) * (1.0 - 1e-9))
        np.testing.assert_allclose(double, 2.0 * single, rtol=1e-6, atol=1e-12)

    def test_deterministic(self, feeder):
        a = build_sensitivities(feeder, DER_BUSES, DER_BUSES)
        b = build_sensitivities(feeder, DER_BUSES, DER_BUSES)
        assert np.array_equal(a.dvmag_dp, b.dvmag_dp)

    def test_empty_bus_list(self, feeder):
        with pytest.raises(ParameterError):
            build_sensitivities(feeder, [], DER_BUSES)

    def test_unsolvable_point(self):
        net = two_bus(r=0.5, x=0.5, load=(5.0, 5.0))
        with pytest.raises(SingularLinearizationError):
            build_sensitivities(net, [1], [1])
