import math
from dataclasses import replace

import numpy as np
import pytest

from model.horizon_model import Direction, estimate_value, rollout
from model.bound_model import StageRangeError
from model.lqg_model import (
    LqgModel, affine_policy_cost, evtg_exact, lqg_as_horizon_problem, q_exact,
    riccati_policy, riccati_recursion, riccati_solve, simulate_affine_policy, stage_cost,
    value_to_go
)


@pytest.fixture(scope='module')
def model() -> LqgModel:
    return LqgModel.path_planning()


@pytest.fixture(scope='module')
def sol(model):
    return riccati_solve(model)


def test_double_integrator_matrices(model):
    t = model.step
    np.testing.assert_array_equal(model.a_matrix, [[1, t, 0, 0], [0, 1, 0, 0],
                                                   [0, 0, 1, t], [0, 0, 0, 1]])
    np.testing.assert_allclose(model.b_matrix, [[t * t / 2, 0], [t, 0],
                                                [0, t * t / 2], [0, t]])
    np.testing.assert_array_equal(model.drift, np.zeros(4))
    np.testing.assert_array_equal(model.initial_error, [-100.0, 0.0, -100.0, 0.0])


def test_invalid_parameters():
    with pytest.raises(ValueError):
        replace(LqgModel.path_planning(), r_diag=(0.5, 0.0))
    with pytest.raises(ValueError):
        replace(LqgModel.path_planning(), q_diag=(1.0, -1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        replace(LqgModel.path_planning(), horizon=0)


def test_moving_target_has_drift():
    moving = replace(LqgModel.path_planning(), x_target=(100.0, 1.0, 100.0, 0.0))
    assert np.any(moving.drift != 0.0)
    with pytest.raises(ValueError):
        riccati_solve(moving)


def test_recursion_boundary_and_structure(model, sol):
    np.testing.assert_array_equal(sol.p_seq[-1], np.diag([500.0, 1000.0, 500.0, 1000.0]))
    assert sol.c_seq[-1] == 0.0
    for k in range(model.horizon):
        p = sol.p_seq[k]
        np.testing.assert_allclose(p, p.T, atol=1e-10)
        assert np.linalg.eigvalsh(p).min() >= -1e-8
        assert np.linalg.eigvalsh(sol.s_seq[k]).min() > 0.0
        assert sol.c_seq[k] == sol.c_seq[k + 1] + np.trace(model.noise_cov @ sol.p_seq[k + 1])


def test_noise_free_offsets_vanish(model):
    sol = riccati_solve(replace(model, sigma_diag=(0.0, 0.0, 0.0, 0.0)))
    np.testing.assert_array_equal(sol.c_seq, np.zeros(model.horizon + 1))


def test_scalar_recursion_by_hand():
    sol = riccati_recursion(1.0, 1.0, 1.0, 1.0, 1.0, 0.0, horizon=1)
    assert sol.p_seq[1, 0, 0] == 1.0
    assert sol.s_seq[0, 0, 0] == 2.0
    assert math.isclose(sol.p_seq[0, 0, 0], 1.5)
    assert math.isclose(sol.k_seq[0, 0, 0], 0.5)
    assert sol.c_seq[0] == 0.0


def test_value_to_go_trivial_cases(model, sol):
    quiet = replace(model, sigma_diag=(0.0, 0.0, 0.0, 0.0))
    assert value_to_go(riccati_solve(quiet), quiet.noise_cov, 0, np.zeros(4)) == 0.0
    z = np.array([1.0, -2.0, 0.5, 3.0])
    assert math.isclose(value_to_go(sol, model.noise_cov, model.horizon, z),
                        z @ model.q_final @ z)
    with pytest.raises(StageRangeError):
        value_to_go(sol, model.noise_cov, model.horizon + 1, z)


def test_optimal_cost_matches_rollouts(model, sol):
    z0 = model.initial_error
    v_star = value_to_go(sol, model.noise_cov, 0, z0)
    assert math.isclose(affine_policy_cost(model, sol.k_seq, None, z0), v_star, rel_tol=1e-9)

    rollouts = simulate_affine_policy(model, sol.k_seq, None, np.tile(z0, (10_000, 1)),
                                      np.random.default_rng(7))
    mean = rollouts.costs.mean()
    stderr = rollouts.costs.std(ddof=1) / math.sqrt(rollouts.costs.size)
    assert abs(mean - v_star) <= 3 * stderr
    assert rollouts.states.shape == (10_000, model.horizon + 1, 4)
    assert rollouts.actions.shape == (10_000, model.horizon, 2)


def test_gain_perturbations_never_help(model, sol):
    z0 = model.initial_error
    v_star = value_to_go(sol, model.noise_cov, 0, z0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        gains = np.array(sol.k_seq)
        stage = int(rng.integers(model.horizon))
        gains[stage] += 0.05 * rng.standard_normal((2, 4))
        assert affine_policy_cost(model, gains, None, z0) >= v_star * (1 - 1e-12)


def test_perturbed_gain_rollouts_stay_above_optimum(model, sol):
    z0s = np.tile(model.initial_error, (5_000, 1))
    v_star = value_to_go(sol, model.noise_cov, 0, model.initial_error)
    gains = np.array(sol.k_seq)
    gains[0] *= 1.5
    costs = simulate_affine_policy(model, gains, None, z0s, np.random.default_rng(2)).costs
    assert costs.mean() + 3 * costs.std(ddof=1) / math.sqrt(costs.size) >= v_star


def test_evtg_collapses_without_noise(model):
    quiet = replace(model, sigma_diag=(0.0, 0.0, 0.0, 0.0))
    sol = riccati_solve(quiet)
    z, mu = np.array([-3.0, 1.0, 2.0, 0.0]), np.array([0.5, -1.0])
    following = quiet.a_matrix @ z + quiet.b_matrix @ mu
    assert math.isclose(evtg_exact(sol, quiet, 4, z, mu),
                        value_to_go(sol, quiet.noise_cov, 4, following), rel_tol=1e-12)


def test_evtg_at_origin(model, sol):
    k = 3
    expected = (np.trace(sol.p_seq[k] @ model.noise_cov)
                + sum(np.trace(model.noise_cov @ p) for p in sol.p_seq[k + 1:]))
    assert math.isclose(evtg_exact(sol, model, k, np.zeros(4), np.zeros(2)), expected)


def test_evtg_matches_sampled_next_states(model, sol):
    rng = np.random.default_rng(11)
    scale = np.sqrt(np.asarray(model.sigma_diag))
    for _ in range(20):
        k = int(rng.integers(1, model.horizon + 1))
        z = rng.normal(0.0, 20.0, size=4)
        mu = rng.normal(0.0, 50.0, size=2)
        mean = model.a_matrix @ z + model.b_matrix @ mu
        samples = mean + rng.standard_normal((100_000, 4)) * scale
        values = value_to_go(sol, model.noise_cov, k, samples)
        stderr = values.std(ddof=1) / math.sqrt(values.size)
        assert abs(values.mean() - evtg_exact(sol, model, k, z, mu)) <= 4 * stderr


def test_q_exact_is_minimized_by_the_gain(model, sol):
    rng = np.random.default_rng(5)
    for k in range(model.horizon):
        z = rng.normal(0.0, 10.0, size=4)
        best = -sol.k_seq[k] @ z
        value = q_exact(sol, model, k, z, best)
        assert math.isclose(value, value_to_go(sol, model.noise_cov, k, z), rel_tol=1e-8)
        for step in np.eye(2):
            assert q_exact(sol, model, k, z, best + 0.1 * step) > value
            assert q_exact(sol, model, k, z, best - 0.1 * step) > value


def test_noise_free_rollout_reproduces_optimum(model):
    quiet = replace(model, sigma_diag=(0.0, 0.0, 0.0, 0.0))
    sol = riccati_solve(quiet)
    problem = lqg_as_horizon_problem(quiet)
    assert problem.direction is Direction.MINIMIZE
    trajectory = rollout(problem, riccati_policy(sol), seed=0)
    assert math.isclose(trajectory.total,
                        value_to_go(sol, quiet.noise_cov, 0, quiet.initial_error),
                        rel_tol=1e-9)
    assert math.isclose(trajectory.stage_rewards[0],
                        stage_cost(quiet, quiet.initial_error, trajectory.actions[0]))


def test_noise_sampler_moments(model):
    problem = lqg_as_horizon_problem(model)
    rng = np.random.default_rng(0)
    draws = np.array([problem.noise_sampler(0, rng) for _ in range(100_000)])
    cov = np.cov(draws, rowvar=False)
    np.testing.assert_allclose(np.diag(cov), model.sigma_diag, rtol=0.05)
    off_diagonal = cov - np.diag(np.diag(cov))
    assert np.abs(off_diagonal).max() <= 0.05 * max(model.sigma_diag)


def test_estimate_value_at_nominal_start(model, sol):
    problem = lqg_as_horizon_problem(model)
    estimate = estimate_value(problem, riccati_policy(sol), 500, seed=9)
    v_star = value_to_go(sol, model.noise_cov, 0, model.initial_error)
    assert abs(estimate.mean - v_star) <= 4 * estimate.std_error


def test_affine_cost_with_offsets_matches_simulation(model, sol):
    offsets = np.full((model.horizon, 2), 3.0)
    z0 = model.initial_error
    exact = affine_policy_cost(model, sol.k_seq, offsets, z0)
    assert exact > value_to_go(sol, model.noise_cov, 0, z0)
    costs = simulate_affine_policy(model, sol.k_seq, offsets, np.tile(z0, (20_000, 1)),
                                   np.random.default_rng(4)).costs
    assert abs(costs.mean() - exact) <= 4 * costs.std(ddof=1) / math.sqrt(costs.size)


def test_affine_shapes_checked(model):
    with pytest.raises(ValueError):
        affine_policy_cost(model, np.zeros((model.horizon, 2, 3)), None, np.zeros(4))
