"""Tests for derms.control module."""
import logging
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from derms.control import (
    AlgorithmParams,
    ControllerState,
    adapt_step_size,
    coordinator_step,
    cosine_similarity,
    estimate_dual_update,
    local_controller_step,
)
from derms.devices import BatteryParams, Der, DeviceState, PvParams
from derms.errors import MeasurementError, ParameterError
from derms.network import ServiceGradients
from derms.profiles import Profile
from derms.services import BoundSchedule, DualState, GridService, ServiceKind


def voltage_service(m=1, beta=1.0, decrease=0.995):
    return GridService(id="v", kind=ServiceKind.VOLTAGE, measurement_ids=tuple(range(m)),
                       schedule=BoundSchedule.constant(0.95, 1.03), beta_init=beta,
                       decrease=decrease, horizon_s=3600.0)


def pv_unit(rating=1.0, available=1.0):
    return Der("pv", 1, PvParams(inverter_rating=rating, availability=Profile.constant(available)))


class TestAlgorithmParams:
    def test_defaults(self):
        params = AlgorithmParams()
        assert (params.nu, params.epsilon) == (1e-3, 1e-4)
        assert (params.s_lower, params.s_upper, params.gamma_up) == (0.0, 0.9, 1.005)
        assert params.decrease_for("any") == 0.95

    def test_per_der_override(self):
        params = AlgorithmParams(der_decrease={"pv3": 0.5})
        assert params.decrease_for("pv3") == 0.5
        assert params.decrease_for("pv4") == 0.95

    @pytest.mark.parametrize("kwargs", [
        {"gamma_up": 0.9},
        {"gamma_up": 1.0},
        {"gamma_down_der": 1.0},
        {"s_lower": 0.5, "s_upper": 0.5},
        {"nu": 0.0},
        {"epsilon": -1.0},
        {"der_decrease": {"pv3": 1.2}},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            AlgorithmParams(**kwargs)


class TestCosineSimilarity:
    @pytest.mark.parametrize("a,b,expected", [
        ([1, 0], [1, 0], 1.0),
        ([1, 0], [-2, 0], -1.0),
        ([1, 0], [0, 3], 0.0),
        ([0, 0], [1, 1], 0.0),
        ([1e-13, 0], [1, 1], 0.0),
    ])
    def test_examples(self, a, b, expected):
        assert cosine_similarity(a, b) == expected

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1, 2], [1, 2, 3])

    def test_random_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            n = int(rng.integers(1, 6))
            x, y = rng.normal(size=n), rng.normal(size=n)
            a, b = rng.uniform(0.01, 100.0, size=2)
            s = cosine_similarity(x, y)
            assert -1.0 <= s <= 1.0
            assert abs(s - cosine_similarity(y, x)) <= 1e-12
            assert abs(s - cosine_similarity(a * x, b * y)) <= 1e-12


class TestAdaptStepSize:
    # (step, similarity, s_lower, s_upper, gamma_up, gamma_down, expected)
    CASES = [
        (10.0, 0.95, 0.0, 0.9, 1.005, 0.5, 10.0 * 1.005),
        (10.0, -0.5, 0.0, 0.9, 1.005, 0.5, 5.0),
        (10.0, 0.5, 0.0, 0.9, 1.005, 0.5, 10.0),
        (10.0, 0.9, 0.0, 0.9, 1.005, 0.5, 10.0),
        (10.0, 0.0, 0.0, 0.9, 1.005, 0.5, 10.0),
        (10.0, 1.0, 0.0, 0.9, 1.005, 0.5, 10.0 * 1.005),
        (10.0, -1.0, 0.0, 0.9, 1.005, 0.5, 5.0),
        (10.0, 0.9000001, 0.0, 0.9, 1.005, 0.5, 10.0 * 1.005),
        (10.0, -1e-9, 0.0, 0.9, 1.005, 0.5, 5.0),
        (2.0, 0.95, 0.0, 0.9, 1.1, 0.8, 2.0 * 1.1),
        (2.0, -0.3, 0.0, 0.9, 1.1, 0.8, 2.0 * 0.8),
        (2.0, 0.6, 0.5, 0.7, 1.1, 0.8, 2.0),
        (2.0, 0.5, 0.5, 0.7, 1.1, 0.8, 2.0),
        (2.0, 0.7, 0.5, 0.7, 1.1, 0.8, 2.0),
        (2.0, 0.49, 0.5, 0.7, 1.1, 0.8, 2.0 * 0.8),
        (2.0, 0.71, 0.5, 0.7, 1.1, 0.8, 2.0 * 1.1),
        (1e-3, -0.6, -0.5, 0.5, 2.0, 0.995, 1e-3 * 0.995),
        (1e-3, -0.5, -0.5, 0.5, 2.0, 0.995, 1e-3),
        (1e-3, 0.5, -0.5, 0.5, 2.0, 0.995, 1e-3),
        (1e3, 1.0, -1.0, 1.0 - 1e-9, 1.005, 0.95, 1e3 * 1.005),
    ]

    @pytest.mark.parametrize("step,similarity,s_lower,s_upper,gamma_up,gamma_down,expected", CASES)
    def test_rule_table(self, step, similarity, s_lower, s_upper, gamma_up, gamma_down, expected):
        params = AlgorithmParams(s_lower=s_lower, s_upper=s_upper, gamma_up=gamma_up, clamp_steps=False)
        assert adapt_step_size(step, similarity, params, gamma_down) == expected

    def test_clamp(self):
        params = AlgorithmParams()
        assert adapt_step_size(1e-6, -1.0, params, 0.5, initial=1.0) == 1e-6
        assert adapt_step_size(1e6, 1.0, params, 0.5, initial=1.0) == 1e6

    def test_repeat_clamp_logs_at_debug(self, caplog):
        params = AlgorithmParams()
        with caplog.at_level(logging.DEBUG, logger="derms.control"):
            adapt_step_size(1e-6, -1.0, params, 0.5, initial=1.0, owner="DER pv3", warned=True)
        assert [r.levelno for r in caplog.records] == [logging.DEBUG]
        assert "DER pv3" in caplog.records[0].getMessage()


class TestDualUpdate:
    def test_slack_constraint(self):
        lower, upper = estimate_dual_update([0.0], [0.0], [1.0], ([0.95], [1.03]), 10.0, 1e-4)
        assert lower[0] == 0.0 and upper[0] == 0.0

    def test_upper_violation(self):
        _, upper = estimate_dual_update([0.0], [0.0], [2.0], ([0.0], [1.0]), 2.0, 0.0)
        assert upper[0] == 2.0

    def test_regularization_decay(self):
        lower, _ = estimate_dual_update([5.0], [0.0], [0.95], ([0.95], [1.03]), 10.0, 1e-4)
        assert lower[0] == pytest.approx(4.995)


class TestCoordinatorStep:
    def test_quiescent(self):
        svc = voltage_service(m=2, beta=3.0)
        dual = DualState.zeros(2, 3.0)
        rows = ServiceGradients(np.ones((2, 2)), np.ones((2, 2)))
        for _ in range(3):
            result = coordinator_step(svc, dual, [1.0, 1.01], ([0.95] * 2, [1.03] * 2), rows, AlgorithmParams())
            dual = result.dual
            assert np.all(result.signal.h_p == 0.0) and np.all(result.signal.h_q == 0.0)
            assert result.beta == 3.0
        assert np.all(dual.stacked == 0.0)

    def test_persistent_violation_accelerates(self):
        params = AlgorithmParams(epsilon=1e-12, clamp_steps=False)
        svc = voltage_service(beta=2.0)
        rows = ServiceGradients(np.array([[0.1]]), np.array([[0.0]]))
        dual = DualState.zeros(1, 2.0)
        betas, uppers = [], []
        for _ in range(3):
            dual = coordinator_step(svc, dual, [1.04], ([0.95], [1.03]), rows, params).dual
            betas.append(dual.beta)
            uppers.append(dual.upper[0])
        assert betas == [2.0, 2.0 * 1.005, 2.0 * 1.005 * 1.005]
        assert uppers[0] < uppers[1] < uppers[2]

    def test_commits_with_new_step_size(self):
        params = AlgorithmParams(epsilon=1e-12, clamp_steps=False)
        svc = voltage_service(beta=2.0)
        rows = ServiceGradients(np.array([[0.1]]), np.array([[0.0]]))
        bounds = ([0.95], [1.03])
        dual = DualState.zeros(1, 2.0)
        for _ in range(2):
            before = dual
            dual = coordinator_step(svc, dual, [1.04], bounds, rows, params).dual
        _, with_old_step = estimate_dual_update(before.lower, before.upper, [1.04], bounds, 2.0, params.epsilon)
        _, with_new_step = estimate_dual_update(before.lower, before.upper, [1.04], bounds, dual.beta, params.epsilon)
        assert dual.upper[0] == with_new_step[0]
        assert dual.upper[0] != with_old_step[0]

    def test_signal_sign(self):
        svc = voltage_service()
        rows = ServiceGradients(np.array([[0.1]]), np.array([[0.05]]))
        dual = DualState(lower=np.array([1.0]), upper=np.array([0.0]), beta=1.0, beta_init=1.0)
        result = coordinator_step(svc, dual, [0.95], ([0.95], [1.03]), rows, AlgorithmParams())
        assert result.signal.h_p[0] > 0.0
        assert result.signal.h_q[0] > 0.0

    def test_manual_mode_keeps_beta(self):
        params = AlgorithmParams(epsilon=1e-12)
        svc = voltage_service(beta=2.0)
        rows = ServiceGradients(np.array([[0.1]]), np.array([[0.0]]))
        dual = DualState.zeros(1, 2.0)
        for _ in range(3):
            dual = coordinator_step(svc, dual, [1.04], ([0.95], [1.03]), rows, params, adaptive=False).dual
        assert dual.beta == 2.0

    def test_missing_measurement(self):
        svc = voltage_service(m=2)
        rows = ServiceGradients(np.ones((2, 1)), np.ones((2, 1)))
        with pytest.raises(MeasurementError):
            coordinator_step(svc, DualState.zeros(2, 1.0), [1.0], ([0.95] * 2, [1.03] * 2), rows, AlgorithmParams())
        with pytest.raises(MeasurementError):
            coordinator_step(svc, DualState.zeros(2, 1.0), [1.0, np.nan], ([0.95] * 2, [1.03] * 2), rows,
                             AlgorithmParams())

    def test_sensitivity_shape_mismatch(self):
        svc = voltage_service(m=2)
        rows = ServiceGradients(np.ones((3, 1)), np.ones((3, 1)))
        with pytest.raises(ParameterError):
            coordinator_step(svc, DualState.zeros(2, 1.0), [1.0, 1.0], ([0.95] * 2, [1.03] * 2), rows,
                             AlgorithmParams())


class TestLocalControllerStep:
    def test_fixed_point_at_cost_minimum(self):
        device = pv_unit(available=0.8)
        params = AlgorithmParams(nu=1e-12)
        ctrl = ControllerState.initial(0.1, DeviceState(p=0.8, q=0.0))
        for _ in range(3):
            ctrl = local_controller_step(device, ctrl, [(0.0, 0.0)], params, 0.0)
        assert ctrl.state.p == pytest.approx(0.8, abs=1e-9)
        assert ctrl.state.q == 0.0
        assert ctrl.alpha == 0.1

    def test_cost_pulls_towards_available_power(self):
        device = pv_unit(available=0.8)
        ctrl = ControllerState.initial(0.1, DeviceState(p=0.0, q=0.0))
        ctrl = local_controller_step(device, ctrl, [(0.0, 0.0)], AlgorithmParams(), 0.0)
        assert ctrl.state.p > 0.0

    def test_alternating_signals_shrink_alpha(self):
        device = pv_unit(available=1.0)
        params = AlgorithmParams()
        ctrl = ControllerState.initial(0.1, DeviceState(p=0.5, q=0.0))
        alphas = []
        for h in (1.0, -1.0, 1.0, -1.0):
            ctrl = local_controller_step(device, ctrl, {"vpp": (h, 0.0)}, params, 0.0)
            alphas.append(ctrl.alpha)
        assert alphas[0] == 0.1
        for before, after in zip(alphas, alphas[1:]):
            assert after == pytest.approx(before * 0.95)

    def test_signals_from_services_add_up(self):
        device = pv_unit(available=0.5)
        start = ControllerState.initial(0.1, DeviceState(p=0.5, q=0.0))
        split = local_controller_step(device, start, {"a": (0.3, 0.1), "b": (-0.5, 0.2)}, AlgorithmParams(), 0.0)
        joint = local_controller_step(device, start, [(-0.2, 0.3)], AlgorithmParams(), 0.0)
        assert split.state.p == pytest.approx(joint.state.p)
        assert split.state.q == pytest.approx(joint.state.q)

    def test_battery_update_is_active_power_only(self):
        params = BatteryParams(capacity=0.2, charge_limit=0.05, discharge_limit=0.05, dt_hours=2.0 / 3600.0)
        device = Der("bat", 1, params)
        ctrl = ControllerState.initial(0.1, DeviceState(p=0.0, soc=70.0))
        ctrl = local_controller_step(device, ctrl, [(0.5, 0.5)], AlgorithmParams(), 0.0)
        assert ctrl.state.p > 0.0
        assert ctrl.state.q == 0.0
        assert ctrl.state.soc == 70.0

    def test_result_is_feasible(self):
        device = pv_unit(rating=1.0, available=0.6)
        ctrl = ControllerState.initial(10.0, DeviceState(p=0.3, q=0.0))
        ctrl = local_controller_step(device, ctrl, [(50.0, 50.0)], AlgorithmParams(), 0.0)
        assert 0.0 <= ctrl.state.p <= 0.6
        assert ctrl.state.p ** 2 + ctrl.state.q ** 2 <= 1.0 + 1e-12

    def test_history_advances_one_step(self):
        device = pv_unit()
        ctrl = ControllerState.initial(0.1, DeviceState(p=0.2, q=0.0))
        nxt = local_controller_step(device, ctrl, [(0.0, 0.0)], AlgorithmParams(), 0.0)
        assert nxt.previous == (0.2, 0.0)
        assert nxt.ticks == 1

    def test_non_positive_alpha(self):
        with pytest.raises(ParameterError):
            ControllerState.initial(0.0, DeviceState(p=0.0))

    def test_clamp_warns_once_per_controller(self, caplog):
        device = pv_unit(available=1.0)
        params = AlgorithmParams(step_floor_ratio=0.9)
        ctrl = ControllerState.initial(0.1, DeviceState(p=0.5, q=0.0))
        with caplog.at_level(logging.DEBUG, logger="derms.control"):
            for h in (1.0, -1.0) * 4:
                ctrl = local_controller_step(device, ctrl, {"vpp": (h, 0.0)}, params, 0.0)
        clamps = [r for r in caplog.records if "clamped" in r.getMessage()]
        assert [r.levelno for r in clamps].count(logging.WARNING) == 1
        assert clamps[0].levelno == logging.WARNING
        assert len(clamps) > 1
        assert ctrl.clamp_warned
        assert ctrl.alpha == pytest.approx(0.09)

    def test_clamp_warns_once_per_coordinator(self, caplog):
        params = AlgorithmParams(epsilon=1e-12, step_floor_ratio=0.9)
        svc = voltage_service(beta=1.0, decrease=0.5)
        rows = ServiceGradients(np.array([[0.1]]), np.array([[0.0]]))
        dual = DualState.zeros(1, 1.0)
        with caplog.at_level(logging.DEBUG, logger="derms.control"):
            for v in (1.04, 1.02) * 4:
                dual = coordinator_step(svc, dual, [v], ([0.95], [1.03]), rows, params).dual
        clamps = [r for r in caplog.records if "clamped" in r.getMessage()]
        assert [r.levelno for r in clamps] == [logging.WARNING] + [logging.DEBUG] * (len(clamps) - 1)
        assert len(clamps) > 1
        assert dual.clamp_warned
        assert dual.beta == pytest.approx(0.9)
