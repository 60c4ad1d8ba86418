import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bpmpc_core.certify import alpha_baseline, primary_weight
from bpmpc_core.config import NOISE_BLOCK
from bpmpc_core.errors import DimensionError, NonFiniteError
from bpmpc_core.mission import MissionSet
from bpmpc_core.multihorizon import MultiHorizonInput, flatten
from bpmpc_core.plant import clamp
from bpmpc_core.solver import (
    SolverParams,
    evaluate_sample,
    gibbs_weights,
    noise_block,
    sample_noise,
    solve,
    solve_detailed,
)

from .conftest import random_input

X0 = np.array([5.0, 9.0])
ALPHA = np.array([0.8, 0.1, 0.1])


def test_solver_params_validation():
    with pytest.raises(ValueError):
        SolverParams(M=0, sigma=[1.0], lambda_=1.0, base_seed=0)
    with pytest.raises(ValueError):
        SolverParams(M=10, sigma=[1.0, 0.0], lambda_=1.0, base_seed=0)
    with pytest.raises(ValueError):
        SolverParams(M=10, sigma=[1.0], lambda_=0.0, base_seed=0)


def test_sample_noise_is_reproducible(small_solver):
    shape = MultiHorizonInput.constant(5, 2, [0, 0]).shape
    eps = sample_noise(small_solver, shape, 70, step_index=3)
    assert eps.shape == (shape.dof,)
    assert_array_equal(eps, sample_noise(small_solver, shape, 70, step_index=3))
    assert_array_equal(eps, noise_block(small_solver, shape, 3, 0, 1)[70 - NOISE_BLOCK - 1])
    assert not np.array_equal(eps, sample_noise(small_solver, shape, 70, step_index=4))
    assert not np.array_equal(eps, sample_noise(small_solver, shape, 70, step_index=3, salt=1))


def test_sample_noise_scales_per_channel():
    params = SolverParams(M=NOISE_BLOCK, sigma=[1.0, 0.0001], lambda_=1.0, base_seed=0)
    shape = MultiHorizonInput.constant(4, 1, [0, 0]).shape
    block = noise_block(params, shape, 0, 0, 0)
    assert np.abs(block[:, 1::2]).max() < 0.01
    assert np.abs(block[:, 0::2]).max() > 0.5


def test_sample_noise_index_range(small_solver):
    shape = MultiHorizonInput.constant(3, 0, [0, 0]).shape
    with pytest.raises(ValueError):
        sample_noise(small_solver, shape, 0)
    with pytest.raises(ValueError):
        sample_noise(small_solver, shape, small_solver.M + 1)


def test_gibbs_weights():
    assert_allclose(gibbs_weights([2.0, 2.0, 2.0, 2.0], 1.0), [0.25] * 4)
    assert_allclose(gibbs_weights([0.0, np.log(3.0)], 1.0), [0.75, 0.25])
    w = gibbs_weights([1e6, 1e6 + 1.0], 1.0)
    assert np.all(np.isfinite(w))
    assert w.sum() == pytest.approx(1.0)
    assert w[0] > w[1]


def test_gibbs_weights_rejects_bad_costs():
    with pytest.raises(NonFiniteError):
        gibbs_weights([0.0, np.nan], 1.0)
    with pytest.raises(NonFiniteError):
        gibbs_weights([0.0, np.inf], 1.0)
    with pytest.raises(DimensionError):
        gibbs_weights([], 1.0)


def test_single_sample_returns_perturbed_mean(si_model, si_cost, si_missions):
    params = SolverParams(M=1, sigma=[1.0, 1.0], lambda_=1.0, base_seed=5)
    U_s = MultiHorizonInput.constant(4, 2, [-1, -1])
    U = solve(si_model, si_cost, si_missions, X0, ALPHA, U_s, params)
    expected = flatten(U_s) + sample_noise(params, U_s.shape, 1)
    expected = clamp(si_model.input_box, expected.reshape(-1, 2)).reshape(-1)
    assert_allclose(flatten(U), expected, rtol=0, atol=1e-12)


def test_tiny_sigma_keeps_candidate(si_model, si_cost, si_missions):
    params = SolverParams(M=64, sigma=[1e-9, 1e-9], lambda_=1.0, base_seed=0)
    U_s = random_input(np.random.default_rng(0), 4, 2, 2)
    U = solve(si_model, si_cost, si_missions, X0, ALPHA, U_s, params)
    assert_allclose(flatten(U), flatten(U_s), rtol=0, atol=1e-6)


def test_output_stays_in_input_box(si_model, si_cost, si_missions):
    params = SolverParams(M=200, sigma=[20.0, 20.0], lambda_=0.1, base_seed=1)
    U_s = MultiHorizonInput.constant(5, 2, [2, -10])
    U = flatten(solve(si_model, si_cost, si_missions, X0, ALPHA, U_s, params)).reshape(-1, 2)
    assert np.all(U >= si_model.input_box.lower)
    assert np.all(U <= si_model.input_box.upper)


def test_result_independent_of_worker_count(si_model, si_cost, si_missions):
    params = SolverParams(M=300, sigma=[1.0, 1.0], lambda_=1.0, base_seed=2)
    U_s = MultiHorizonInput.constant(5, 2, [0, 0])
    serial = solve_detailed(si_model, si_cost, si_missions, X0, ALPHA, U_s, params, step_index=4)
    pooled = solve_detailed(si_model, si_cost, si_missions, X0, ALPHA, U_s, params, step_index=4, workers=4)
    assert_array_equal(serial.costs, pooled.costs)
    assert_array_equal(flatten(serial.U), flatten(pooled.U))
    assert serial.costs.shape == (300,)


def test_costs_match_single_sample_evaluation(si_model, si_cost, si_missions, small_solver):
    U_s = random_input(np.random.default_rng(1), 4, 2, 2)
    result = solve_detailed(si_model, si_cost, si_missions, X0, ALPHA, U_s, small_solver, step_index=2, salt=1)
    for q in (1, 64, 65, 128):
        eps = sample_noise(small_solver, U_s.shape, q, step_index=2, salt=1)
        expected = evaluate_sample(si_model, si_cost, si_missions, X0, ALPHA, U_s, eps)
        assert result.costs[q - 1] == pytest.approx(expected, rel=1e-9)
    evals = list(result.evaluations())
    assert [e.sample_index for e in evals[:2]] == [1, 2]
    assert sum(e.gibbs_weight for e in evals) == pytest.approx(1.0)


def test_primary_weight_ignores_tails(si_model, si_cost, si_missions):
    params = SolverParams(M=128, sigma=[1.0, 1.0], lambda_=1.0, base_seed=6, state_penalty=0.0)
    rng = np.random.default_rng(3)
    U_a = random_input(rng, 4, 2, 2)
    U_b = MultiHorizonInput(U_a.primary, random_input(rng, 4, 2, 2).tails)
    e0 = primary_weight(2)
    out_a = solve(si_model, si_cost, si_missions, X0, e0, U_a, params)
    out_b = solve(si_model, si_cost, si_missions, X0, e0, U_b, params)
    assert_array_equal(out_a.primary, out_b.primary)


def test_state_penalty(si_model, si_cost):
    missions = MissionSet([[0, 0]])
    U_s = MultiHorizonInput.constant(2, 0, [2, 2])
    zero = np.zeros(U_s.shape.dof)
    assert evaluate_sample(si_model, si_cost, missions, [10, 10], [1.0], U_s, zero) > 1e6
    free = evaluate_sample(si_model, si_cost, missions, [10, 10], [1.0], U_s, zero, state_penalty=0.0)
    assert free < 1e3


def test_evaluation_clamps_inputs(si_model, si_cost, si_missions):
    U_s = MultiHorizonInput.constant(3, 2, [0, 0])
    big = np.full(U_s.shape.dof, 50.0)
    at_bound = np.full(U_s.shape.dof, 2.0)
    a = evaluate_sample(si_model, si_cost, si_missions, [0, 0], ALPHA, U_s, big, state_penalty=0.0)
    b = evaluate_sample(si_model, si_cost, si_missions, [0, 0], ALPHA, U_s, at_bound, state_penalty=0.0)
    assert a == pytest.approx(b)


def test_control_cost_term(si_model, si_cost, si_missions):
    U_s = MultiHorizonInput.constant(3, 2, [-1, 0.5])
    plain = SolverParams(M=64, sigma=[1.0, 2.0], lambda_=0.5, base_seed=8)
    extra = SolverParams(M=64, sigma=[1.0, 2.0], lambda_=0.5, base_seed=8, control_cost=True)
    a = solve_detailed(si_model, si_cost, si_missions, X0, ALPHA, U_s, plain)
    b = solve_detailed(si_model, si_cost, si_missions, X0, ALPHA, U_s, extra)
    scale = np.tile([1.0, 4.0], U_s.shape.dof // 2)
    weight = 0.5 * flatten(U_s) / scale
    for q in (1, 33, 64):
        eps = sample_noise(plain, U_s.shape, q)
        assert b.costs[q - 1] - a.costs[q - 1] == pytest.approx(eps @ weight, abs=1e-6)


def test_mission_count_mismatch(si_model, si_cost, si_missions, small_solver):
    U_s = MultiHorizonInput.constant(3, 1, [0, 0])
    with pytest.raises(DimensionError):
        solve(si_model, si_cost, si_missions, X0, ALPHA, U_s, small_solver)


def test_sample_noise_mean_over_many_draws():
    draws = 100_000
    params = SolverParams(M=draws, sigma=[1.0, 3.0], lambda_=1.0, base_seed=2)
    shape = MultiHorizonInput.constant(3, 1, [0, 0]).shape
    blocks = [noise_block(params, shape, 0, 0, b) for b in range(-(-draws // NOISE_BLOCK))]
    eps = np.concatenate(blocks)[:draws]
    bound = 4 * np.tile(params.sigma, shape.dof // 2) / np.sqrt(draws)
    assert np.all(np.abs(eps.mean(axis=0)) <= bound)


@pytest.mark.slow
def test_solve_beats_most_samples(si_model, si_cost, si_missions, si_params):
    alpha = alpha_baseline(si_params, si_missions, X0)
    U_s = MultiHorizonInput.constant(5, 2, [0, 0])
    zero = np.zeros(U_s.shape.dof)
    wins = 0
    for seed in range(10):
        params = SolverParams(M=10_000, sigma=[1.0, 1.0], lambda_=1.0, base_seed=seed, state_penalty=0.0)
        res = solve_detailed(si_model, si_cost, si_missions, X0, alpha, U_s, params)
        cost = evaluate_sample(si_model, si_cost, si_missions, X0, alpha, res.U, zero, state_penalty=0.0)
        wins += cost <= np.percentile(res.costs, 10)
    assert wins >= 9
