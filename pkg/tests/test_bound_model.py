import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from model.horizon_model import (
    DiscreteMdp, Direction, FiniteActions, HorizonProblem, ValueEstimate, random_mdp,
    rollout, solve_exact
)
from model.bound_model import (
    AdpScheme, BoundReport, DegenerateBoxError, NonFiniteDeltaError, SearchBox,
    StageRangeError, StepwiseErrorModel, TabularScheme, assemble_bound, delta_table,
    epsilon_continuous, epsilon_discrete, epsilons_discrete, sampled_delta,
    telescoping_check
)


class LinearDelta:
    def __init__(self, slope):
        self.slope = np.asarray(slope, dtype=float)

    def __call__(self, point):
        return float(self.slope @ point)

    def gradient(self, point):
        return self.slope


def single_stage_model(delta, box, direction=Direction.MAXIMIZE) -> StepwiseErrorModel:
    return StepwiseErrorModel(deltas=(delta,), boxes=(box,), direction=direction)


def counter_problem(horizon: int = 3) -> HorizonProblem:
    return HorizonProblem(
        horizon=horizon,
        direction=Direction.MAXIMIZE,
        initial_state=0,
        transition=lambda k, x, mu, w: x + mu,
        noise_sampler=lambda k, rng: 0.0,
        stage_reward=lambda k, x, mu: float(x * mu),
        terminal_reward=lambda x: 10.0 * x,
        feasible_actions=lambda k, x: FiniteActions((0, 1, 2))
    )


def test_exact_scheme_has_zero_errors():
    mdp = random_mdp(5, 3, 4, seed=1)
    scheme = TabularScheme.exact(mdp, solve_exact(mdp))
    for k in range(1, mdp.horizon):
        np.testing.assert_allclose(delta_table(mdp, scheme, k), 0.0, atol=1e-10)
    assert all(abs(e) <= 1e-10 for e in epsilons_discrete(mdp, scheme))


def test_uniform_shift_cancels():
    mdp = random_mdp(4, 3, 4, seed=2)
    solution = solve_exact(mdp)
    scheme = TabularScheme(mdp, solution.w_star + 7.5)
    for k in range(1, mdp.horizon):
        assert abs(epsilon_discrete(mdp, scheme, k)) <= 1e-10


def test_greedy_epsilon_matches_enumeration():
    mdp = random_mdp(4, 3, 3, seed=4)
    scheme = TabularScheme.greedy(mdp)
    last = mdp.horizon - 1
    for k in range(1, mdp.horizon):
        best = -math.inf
        for x, mu in itertools.product(range(mdp.n_states), range(mdp.n_actions)):
            expected = 0.0
            for nxt in range(mdp.n_states):
                q_next = list(mdp.rewards[k, nxt])
                if k == last:
                    q_next = [r + mdp.kernel[k, nxt, a] @ mdp.terminal
                              for a, r in enumerate(q_next)]
                expected += mdp.kernel[k - 1, x, mu, nxt] * max(q_next)
            best = max(best, expected)
        assert math.isclose(epsilon_discrete(mdp, scheme, k), best, rel_tol=1e-12)


@pytest.mark.parametrize('mirror', [False, True])
@pytest.mark.parametrize('seed', range(6))
def test_bound_validity(seed, mirror):
    mdp = random_mdp(4, 3, 4, seed=seed)
    if mirror:
        mdp = mdp.mirrored()
    solution = solve_exact(mdp)
    schemes = [TabularScheme.greedy(mdp),
               TabularScheme.noisy(mdp, solution, 0.3, seed=seed),
               TabularScheme.noisy(mdp, solution, 2.0, seed=seed + 100)]
    for scheme in schemes:
        report = assemble_bound(mdp.as_horizon_problem(), scheme,
                                epsilons_discrete(mdp, scheme), 2, 0,
                                value=ValueEstimate(0.0, 0.0, 0))
        slack = mdp.direction.sign * (report.bound - solution.v_star_total)
        assert slack >= -1e-9, scheme.name


def test_exact_scheme_bound_equals_v_star():
    mdp = random_mdp(3, 2, 3, seed=6)
    solution = solve_exact(mdp)
    scheme = TabularScheme.exact(mdp, solution)
    epsilons = epsilons_discrete(mdp, scheme)
    report = assemble_bound(mdp.as_horizon_problem(), scheme, epsilons, 2000, seed=3)
    assert abs(report.bound - solution.v_star_total) <= 1e-9
    assert math.isclose(report.bound - report.q_hat_0, math.fsum(epsilons), abs_tol=1e-12)
    assert abs(report.v_hat.mean - solution.v_star_total) <= 4 * report.v_hat.std_error
    assert report.direction is Direction.MAXIMIZE


def test_zero_bound_gives_nan_ratio():
    mdp = random_mdp(2, 2, 2, seed=0)
    flat = DiscreteMdp(mdp.kernel, np.zeros_like(mdp.rewards), np.zeros(2), mdp.feasible)
    scheme = TabularScheme.greedy(flat)
    report = assemble_bound(flat.as_horizon_problem(), scheme, epsilons_discrete(flat, scheme),
                            2, 0, value=ValueEstimate(0.0, 0.0, 0))
    assert report.bound == 0.0
    assert math.isnan(report.beta)


def test_epsilon_count_checked():
    mdp = random_mdp(2, 2, 3, seed=0)
    with pytest.raises(ValueError):
        assemble_bound(mdp.as_horizon_problem(), TabularScheme.greedy(mdp), [0.0], 2, 0)


def test_stage_range():
    mdp = random_mdp(2, 2, 3, seed=0)
    with pytest.raises(StageRangeError):
        epsilon_discrete(mdp, TabularScheme.greedy(mdp), 0)
    with pytest.raises(StageRangeError):
        epsilon_discrete(mdp, TabularScheme.greedy(mdp), 3)


def test_sampled_delta_matches_table():
    mdp = random_mdp(4, 2, 3, seed=12)
    scheme = TabularScheme.greedy(mdp)
    table = delta_table(mdp, scheme, 1)
    estimate = sampled_delta(mdp.as_horizon_problem(), scheme, 1, 2, 1, n_draws=20_000, seed=5)
    assert abs(estimate.mean - table[2, 1]) <= 4 * estimate.std_error


def test_concave_quadratic_interior_maximum():
    center = np.array([0.5, -0.3])
    delta = lambda v: 3.0 - float(np.sum((v - center) ** 2))
    box = SearchBox(np.array([-2.0, -2.0]), np.array([2.0, 2.0]))
    epsilon = epsilon_continuous(single_stage_model(delta, box), 1, starts=4, seed=0)
    assert abs(epsilon - 3.0) <= 1e-6


def test_zero_delta():
    box = SearchBox(np.zeros(3), np.ones(3))
    assert epsilon_continuous(single_stage_model(lambda v: 0.0, box), 1, starts=3) == 0.0


@pytest.mark.parametrize('direction', [Direction.MAXIMIZE, Direction.MINIMIZE])
def test_linear_delta_hits_best_vertex(direction):
    slope = np.array([1.0, -2.0, 0.5])
    box = SearchBox(np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 4.0]))
    expected = direction.opt(slope @ vertex for vertex in box.vertices())
    model = single_stage_model(LinearDelta(slope), box, direction)
    assert math.isclose(epsilon_continuous(model, 1, starts=5, seed=1), expected, rel_tol=1e-9)


def test_larger_box_never_lowers_epsilon():
    slope = np.array([0.3, -1.2])
    box = SearchBox(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    small = epsilon_continuous(single_stage_model(LinearDelta(slope), box), 1, starts=4)
    large = epsilon_continuous(single_stage_model(LinearDelta(slope), box.scaled(2.0)), 1,
                               starts=4)
    assert large >= small


def test_degenerate_box():
    with pytest.raises(DegenerateBoxError) as info:
        SearchBox(np.array([0.0, 1.0]), np.array([1.0, 1.0]), stage=2)
    assert info.value.coordinate == 1
    with pytest.raises(DegenerateBoxError):
        SearchBox.from_samples(np.array([[0.0, 1.0], [1.0, 1.0]]))


def test_box_from_samples_margin():
    box = SearchBox.from_samples(np.array([[0.0, 2.0], [4.0, 6.0]]), margin=1.5)
    np.testing.assert_allclose(box.lower, [-1.0, 1.0])
    np.testing.assert_allclose(box.upper, [5.0, 7.0])


def test_non_finite_delta():
    box = SearchBox(np.zeros(2), np.ones(2))
    with pytest.raises(NonFiniteDeltaError):
        epsilon_continuous(single_stage_model(lambda v: math.nan, box), 1, starts=1)


@settings(max_examples=30, deadline=None)
@given(x=st.integers(-5, 5), k=st.integers(0, 2), mu=st.sampled_from([0, 1, 2]))
def test_q_hat_minus_w_hat_is_reward(x, k, mu):
    problem = counter_problem()
    scheme = AdpScheme(problem, lambda stage, state, action: 0.5 * state - stage * action)
    assert scheme.q_hat(k, x, mu) - scheme.w_hat(k, x, mu) == problem.stage_reward(k, x, mu)


def test_adp_policy_is_feasible():
    problem = counter_problem()
    scheme = AdpScheme(problem, lambda stage, state, action: -abs(action - 1))
    for k in range(problem.horizon):
        assert problem.feasible_actions(k, 3).contains(scheme.action(k, 3))


def telescoping_scheme(problem: HorizonProblem, offset: float = 0.0) -> AdpScheme:
    last = problem.horizon - 1

    def w_hat(stage, state, action):
        if stage == last:
            return problem.terminal_reward(state + action) + offset
        return 0.7 * state - 1.3 * action * stage + 2.0

    return AdpScheme(problem, w_hat)


@settings(max_examples=20, deadline=None)
@given(actions=st.lists(st.sampled_from([0, 1, 2]), min_size=4, max_size=4))
def test_telescoping_residual_vanishes(actions):
    problem = counter_problem(horizon=4)
    trajectory = rollout(problem, lambda k, x: actions[k], seed=0)
    residual = telescoping_check(problem, telescoping_scheme(problem), trajectory)
    assert residual <= 1e-9 * max(1.0, abs(trajectory.total))


def test_telescoping_residual_detects_terminal_error():
    problem = counter_problem(horizon=3)
    trajectory = rollout(problem, lambda k, x: 1, seed=0)
    residual = telescoping_check(problem, telescoping_scheme(problem, offset=2.5), trajectory)
    assert math.isclose(residual, 2.5)


def test_report_row_layout():
    report = BoundReport(ValueEstimate(9.0, 0.1, 10), 8.0, (1.0, 0.5), 9.5, 9.0 / 9.5,
                         Direction.MAXIMIZE)
    assert BoundReport.columns(3) == ['v_hat', 'v_hat_stderr', 'q_hat_0', 'eps_1', 'eps_2',
                                      'bound', 'beta']
    assert report.as_row()['eps_2'] == 0.5
    assert report.as_row()['bound'] == 9.5
