import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from model.horizon_model import (
    DiscreteMdp, Direction, EuclideanActions, FiniteActions, HorizonProblem,
    InfeasibleActionError, InfeasibleStageError, MdpFormatError, as_seed_sequence,
    estimate_value, evaluate_policy_exact, random_mdp, read_mdp, rollout, solve_exact,
    write_mdp
)


def chain_mdp() -> DiscreteMdp:
    # States a=0, b=1; actions stay=0, go=1; reward 1 whenever the state is b
    kernel = np.zeros((2, 2, 2, 2))
    kernel[:, 0, 0, 0] = 1.0
    kernel[:, 0, 1, 1] = 1.0
    kernel[:, 1, :, 1] = 1.0
    rewards = np.zeros((2, 2, 2))
    rewards[:, 1, :] = 1.0
    return DiscreteMdp(kernel, rewards, np.zeros(2), np.ones((2, 2, 2), dtype=bool))


def counter_problem(horizon: int = 3) -> HorizonProblem:
    """
    Deterministic integer walk: x' = x + mu, reward x + mu, terminal 10 x.
    """
    return HorizonProblem(
        horizon=horizon,
        direction=Direction.MAXIMIZE,
        initial_state=0,
        transition=lambda k, x, mu, w: x + mu,
        noise_sampler=lambda k, rng: 0.0,
        stage_reward=lambda k, x, mu: float(x + mu),
        terminal_reward=lambda x: 10.0 * x,
        feasible_actions=lambda k, x: FiniteActions((0, 1, 2))
    )


def brute_force_value(mdp: DiscreteMdp, stage: int, state: int) -> float:
    if stage == mdp.horizon:
        return float(mdp.terminal[state])
    values = []
    for action in mdp.feasible_indices(stage, state):
        following = sum(
            mdp.kernel[stage, state, action, nxt] * brute_force_value(mdp, stage + 1, nxt)
            for nxt in range(mdp.n_states)
        )
        values.append(mdp.rewards[stage, state, action] + following)
    return mdp.direction.opt(values)


def test_single_stage_argmax():
    mdp = DiscreteMdp(
        kernel=np.ones((1, 1, 2, 1)),
        rewards=np.array([[[3.0, 5.0]]]),
        terminal=np.zeros(1),
        feasible=np.ones((1, 1, 2), dtype=bool)
    )
    solution = solve_exact(mdp)
    assert solution.v_star_total == 5.0
    assert solution.policy[0, 0] == 1


def test_single_stage_ties_pick_lowest_index():
    mdp = DiscreteMdp(
        kernel=np.ones((1, 1, 3, 1)),
        rewards=np.array([[[2.0, 2.0, 1.0]]]),
        terminal=np.zeros(1),
        feasible=np.ones((1, 1, 3), dtype=bool)
    )
    assert solve_exact(mdp).policy[0, 0] == 0
    assert solve_exact(mdp.mirrored()).policy[0, 0] == 0


def test_deterministic_chain():
    solution = solve_exact(chain_mdp())
    assert solution.v_star_total == 1.0
    assert solution.policy[0, 0] == 1


def test_random_instance_matches_brute_force():
    mdp = random_mdp(4, 3, 4, seed=11)
    solution = solve_exact(mdp)
    assert math.isclose(solution.v_star_total, brute_force_value(mdp, 0, 0), rel_tol=1e-12)


def test_bellman_and_evtg_identities():
    mdp = random_mdp(5, 3, 4, seed=3)
    s = solve_exact(mdp)
    for k in range(mdp.horizon):
        np.testing.assert_allclose(s.q_star[k], mdp.rewards[k] + s.w_star[k], atol=1e-12)
        np.testing.assert_allclose(s.w_star[k], mdp.kernel[k] @ s.v_star[k + 1], atol=1e-10)
        np.testing.assert_allclose(s.v_star[k], s.q_star[k].max(axis=1), atol=1e-10)
    # W*_k equals the expectation of max Q*_k one step ahead
    for k in range(1, mdp.horizon):
        np.testing.assert_allclose(
            s.w_star[k - 1], mdp.kernel[k - 1] @ s.q_star[k].max(axis=1), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-5.0, 5.0))
def test_reward_shift(seed, shift):
    mdp = random_mdp(3, 3, 3, seed=seed)
    shifted = DiscreteMdp(mdp.kernel, mdp.rewards + shift, mdp.terminal + shift, mdp.feasible)
    base, moved = solve_exact(mdp), solve_exact(shifted)
    assert math.isclose(moved.v_star_total, base.v_star_total + (mdp.horizon + 1) * shift,
                        rel_tol=1e-9, abs_tol=1e-9)
    np.testing.assert_array_equal(moved.policy, base.policy)


def test_mirrored_negates_value():
    mdp = random_mdp(4, 2, 3, seed=5)
    mirror = mdp.mirrored()
    assert mirror.direction is Direction.MINIMIZE
    assert math.isclose(solve_exact(mirror).v_star_total, -solve_exact(mdp).v_star_total)


def test_reachable_state_without_action_raises():
    mdp = chain_mdp()
    feasible = np.ones((2, 2, 2), dtype=bool)
    feasible[1, 1, :] = False
    broken = DiscreteMdp(mdp.kernel, mdp.rewards, mdp.terminal, feasible)
    with pytest.raises(InfeasibleStageError) as info:
        solve_exact(broken)
    assert (info.value.stage, info.value.state) == (1, 1)


def test_unreachable_state_without_action_is_ignored():
    mdp = chain_mdp()
    feasible = np.ones((2, 2, 2), dtype=bool)
    feasible[0, 1, :] = False
    solution = solve_exact(DiscreteMdp(mdp.kernel, mdp.rewards, mdp.terminal, feasible))
    assert solution.policy[0, 1] == -1
    assert solution.v_star_total == 1.0


def test_kernel_rows_must_sum_to_one():
    kernel = np.full((1, 2, 1, 2), 0.4)
    with pytest.raises(ValueError):
        DiscreteMdp(kernel, np.zeros((1, 2, 1)), np.zeros(2), np.ones((1, 2, 1), dtype=bool))


def test_zero_horizon_rejected():
    with pytest.raises(ValueError):
        counter_problem(horizon=0)


def test_zero_noise_rollout_total():
    trajectory = rollout(counter_problem(), lambda k, x: 2, seed=0)
    assert trajectory.states == (0, 2, 4, 6)
    assert trajectory.stage_rewards == (2.0, 4.0, 6.0)
    assert trajectory.total == 72.0


def test_rollout_rejects_infeasible_action():
    with pytest.raises(InfeasibleActionError) as info:
        rollout(counter_problem(), lambda k, x: 3 if k == 1 else 0, seed=0)
    assert info.value.stage == 1
    assert info.value.state == 0


def test_rollout_is_seeded():
    problem = random_mdp(5, 2, 4, seed=8).as_horizon_problem()
    policy = lambda k, x: 0
    first = rollout(problem, policy, seed=123)
    second = rollout(problem, policy, seed=123)
    assert first.states == second.states
    assert first.actions == second.actions


def test_estimate_value_zero_noise():
    estimate = estimate_value(counter_problem(), lambda k, x: 1, 10, seed=4)
    assert estimate.std_error == 0.0
    assert estimate.mean == 36.0


def test_estimate_value_needs_two_rollouts():
    with pytest.raises(ValueError):
        estimate_value(counter_problem(), lambda k, x: 1, 1, seed=0)


def test_estimate_value_matches_exact_value():
    mdp = random_mdp(4, 3, 3, seed=21)
    solution = solve_exact(mdp)
    estimate = estimate_value(mdp.as_horizon_problem(), solution.policy_rule(), 20_000, seed=1)
    assert abs(estimate.mean - solution.v_star_total) <= 4 * estimate.std_error


def test_evaluate_policy_exact_of_optimal_policy():
    mdp = random_mdp(5, 4, 4, seed=2)
    solution = solve_exact(mdp)
    assert math.isclose(evaluate_policy_exact(mdp, solution.policy), solution.v_star_total,
                        rel_tol=1e-12)
    worse = evaluate_policy_exact(mdp, np.zeros_like(solution.policy))
    assert worse <= solution.v_star_total + 1e-12


def test_seed_sequence_copies_are_fresh():
    seed = np.random.SeedSequence(42)
    first = [s.generate_state(1)[0] for s in as_seed_sequence(seed).spawn(3)]
    second = [s.generate_state(1)[0] for s in as_seed_sequence(seed).spawn(3)]
    assert first == second


def test_action_domains():
    assert FiniteActions((0, 2)).contains(2)
    assert not FiniteActions((0, 2)).contains(1)
    with pytest.raises(ValueError):
        FiniteActions(())
    box = EuclideanActions(2, lower=(-1.0, -1.0), upper=(1.0, 1.0))
    assert box.contains(np.array([0.5, -1.0]))
    assert not box.contains(np.array([2.0, 0.0]))
    assert not EuclideanActions(2).contains(np.array([np.nan, 0.0]))


def test_mdp_file_round_trip(tmp_path):
    mdp = random_mdp(3, 2, 2, seed=9).mirrored()
    path = tmp_path / 'instance.mdp'
    write_mdp(mdp, path)
    loaded = read_mdp(path)
    assert loaded.direction is Direction.MINIMIZE
    np.testing.assert_array_equal(loaded.kernel, mdp.kernel)
    np.testing.assert_array_equal(loaded.rewards, mdp.rewards)
    assert solve_exact(loaded).v_star_total == solve_exact(mdp).v_star_total


def test_mdp_file_with_bad_header(tmp_path):
    path = tmp_path / 'broken.mdp'
    path.write_text('3 2 2 0 sideways\n', encoding='utf-8')
    with pytest.raises(MdpFormatError):
        read_mdp(path)


def test_mdp_format_errors_name_the_file_line(tmp_path):
    path = tmp_path / 'gappy.mdp'
    write_mdp(chain_mdp(), path)
    lines = path.read_text(encoding='utf-8').splitlines()
    lines[9] = '0'
    path.write_text('\n'.join([lines[0], '', ''] + lines[1:]) + '\n', encoding='utf-8')
    with pytest.raises(MdpFormatError, match=r'line 12 needs 2 values'):
        read_mdp(path)


def test_reachable_state_without_action_is_rejected_on_load(tmp_path):
    mdp = chain_mdp()
    feasible = np.ones((2, 2, 2), dtype=bool)
    feasible[1, 1, :] = False
    path = tmp_path / 'stuck.mdp'
    write_mdp(DiscreteMdp(mdp.kernel, mdp.rewards, mdp.terminal, feasible), path)
    with pytest.raises(MdpFormatError, match=r'line 18: reachable state 1 at stage 1'):
        read_mdp(path)

    feasible = np.ones((2, 2, 2), dtype=bool)
    feasible[0, 1, :] = False
    write_mdp(DiscreteMdp(mdp.kernel, mdp.rewards, mdp.terminal, feasible), path)
    assert read_mdp(path).feasible[0, 1].sum() == 0
