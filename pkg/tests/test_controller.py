import logging
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bpmpc_core.certify import alpha_baseline, primary_weight
from bpmpc_core.controller import ControllerDeps, controller_step, in_ball, initialize, value
from bpmpc_core.errors import ConfigError, DimensionError
from bpmpc_core.mission import vector_cost
from bpmpc_core.multihorizon import shift
from bpmpc_core.plant import step

HORIZON = 4


@pytest.fixture
def deps(si_model, si_cost, si_missions, si_params, small_solver):
    return ControllerDeps(si_model, si_cost, si_missions, si_params, small_solver)


def _fly(deps, x0, steps):
    state = initialize(deps.model, deps.missions, deps.params, deps.solver, x0, HORIZON)
    x = np.asarray(x0, dtype=float)
    history = []
    for _ in range(steps):
        prev = state
        u, state, record = controller_step(prev, x, deps)
        history.append((prev, record))
        x = step(deps.model, x, u)
    return history


def test_in_ball_is_open(si_missions):
    assert in_ball(si_missions, 3.0, [2.9, 0])
    assert not in_ball(si_missions, 3.0, [3.0, 0])


def test_value():
    assert value([0.5, 0.5], [2.0, 4.0]) == 3.0
    assert value([1.0, 0.0], [7.0, 100.0]) == 7.0
    with pytest.raises(DimensionError):
        value([1.0], [1.0, 2.0])


def test_initialize_outside_ball(si_model, si_missions, si_params, small_solver):
    state = initialize(si_model, si_missions, si_params, small_solver, [5, 9], HORIZON)
    assert not state.latched
    assert state.step_index == 0
    assert_allclose(state.alpha_prev, alpha_baseline(si_params, si_missions, [5, 9]))
    assert_array_equal(state.U_prev.primary, np.zeros((HORIZON, 2)))
    assert len(state.U_prev.tails) == 2


def test_initialize_inside_ball(si_model, si_missions, si_params, small_solver):
    state = initialize(si_model, si_missions, si_params, small_solver, [1, 1], HORIZON)
    assert state.latched
    assert_array_equal(state.alpha_prev, primary_weight(2))


def test_initialize_rejects_state_outside_box(si_model, si_missions, si_params, small_solver):
    with pytest.raises(ConfigError):
        initialize(si_model, si_missions, si_params, small_solver, [11, 0], HORIZON)


def test_initialize_can_start_outside_box(si_model, si_missions, si_params, small_solver, caplog):
    with caplog.at_level(logging.WARNING, logger="bpmpc_core.controller"):
        state = initialize(si_model, si_missions, si_params, small_solver, [-3, 0], HORIZON, require_in_box=False)
    assert_array_equal(state.x_prev, [-3, 0])
    assert not state.latched
    assert "超出 state box" in caplog.text



def test_step_inputs_stay_in_box(deps):
    box = deps.model.input_box
    for _, record in _fly(deps, [5, 9], 8):
        assert np.all(record.u_star >= box.lower) and np.all(record.u_star <= box.upper)
        assert record.alpha_star.sum() == pytest.approx(1.0)
        assert np.isfinite(record.value)


def test_latch_is_monotone(deps):
    history = _fly(deps, [5, 9], 25)
    phases = [record.phase for _, record in history]
    assert phases == sorted(phases)
    assert phases[-1] == 2
    first = phases.index(2)
    assert_array_equal(history[first][1].alpha_star, primary_weight(2))


def test_transitional_weight_does_not_increase_candidate_value(deps):
    for prev, record in _fly(deps, [5, 9], 6):
        if record.phase != 1:
            continue
        U_s = shift(
            prev.U_prev, deps.model, prev.x_prev, deps.params.K, deps.params.u_hat, origin=deps.missions.primary
        )
        J_s = vector_cost(deps.model, deps.spec_set, deps.missions, record.x, U_s)
        assert record.value_candidate == pytest.approx(value(record.alpha_star, J_s))
        assert record.value_candidate <= value(prev.alpha_prev, J_s) + 1e-12


def test_phase_two_uses_primary_weight(deps):
    state = initialize(deps.model, deps.missions, deps.params, deps.solver, [2, 0], HORIZON)
    _, state, record = controller_step(state, [2, 0], deps)
    assert record.phase == 2 and record.in_ball_x
    # 已鎖定：即使離開 B_δ 仍維持 phase 2
    _, state, record = controller_step(state, [6, 6], deps)
    assert record.phase == 2 and not record.in_ball_x
    assert state.latched
    assert_array_equal(record.alpha_star, primary_weight(2))


def test_step_is_deterministic(deps):
    a = _fly(deps, [5, 9], 4)
    b = _fly(deps, [5, 9], 4)
    for (_, ra), (_, rb) in zip(a, b):
        assert_array_equal(ra.u_star, rb.u_star)
        assert ra.value == rb.value


def test_seed_changes_inputs(deps):
    other = replace(deps, solver=replace(deps.solver, base_seed=4))
    a = _fly(deps, [5, 9], 1)[0][1]
    b = _fly(other, [5, 9], 1)[0][1]
    assert not np.array_equal(a.u_star, b.u_star)
