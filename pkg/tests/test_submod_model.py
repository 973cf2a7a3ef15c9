import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from model.horizon_model import ValueEstimate
from model.bound_model import assemble_bound
from model.submod_model import (
    CLASSIC_BOUND, BudgetExceededError, DegenerateObjectiveError, SubmodMode,
    SubmodObjective, bound_classic, bound_greedy_curvature, bound_top_h, brute_force_opt,
    embed_as_horizon_problem, embedded_epsilons, enumeration_count, greedy,
    greedy_curvature, greedy_scheme, modular_objective, private_cover_objective,
    telescoping_residual, top_h_value, verify_submodular, weighted_cover_objective
)


def max_cover_toy() -> SubmodObjective:
    # A = {1, 2}, B = {2, 3}, C = {3}
    return weighted_cover_objective([1.0, 1.0, 1.0], [[0, 1], [1, 2], [2]], SubmodMode.SET, 2,
                                    labels=['A', 'B', 'C'])


def greedy_trap() -> SubmodObjective:
    # Greedy takes the big middle set first and loses a third of the coverage
    covers = [[0, 1, 2, 3, 8], [0, 1, 4, 5], [2, 3, 6, 7]]
    return weighted_cover_objective(np.ones(9), covers, SubmodMode.SET, 2)


def random_string_cover(seed: int, horizon: int = 3, decaying: bool = False) \
-> SubmodObjective:
    rng = np.random.default_rng(seed)
    n_items, n_elements = 6, 4
    covers = [list(np.flatnonzero(rng.random(n_items) < 0.4)) for _ in range(n_elements)]
    covers.append([])
    strengths = np.linspace(1.0, 0.6, horizon) if decaying else None
    return weighted_cover_objective(rng.uniform(0.5, 2.0, n_items), covers,
                                    SubmodMode.STRING, horizon, strengths)


def test_modular_set_instance():
    obj = modular_objective([3.0, 2.0, 1.0], SubmodMode.SET, 2)
    run = greedy(obj)
    assert run.sequence == (0, 1)
    assert run.value == 5.0
    assert brute_force_opt(obj) == ((0, 1), 5.0)
    assert top_h_value(run, obj) == 5.0
    assert bound_top_h(run, obj) == 1.0
    assert greedy_curvature(run) == 1.0
    assert bound_greedy_curvature(run, obj) == 1.0


def test_modular_string_instance():
    obj = modular_objective([3.0, 2.0, 1.0], SubmodMode.STRING, 2)
    run = greedy(obj)
    assert run.sequence == (0, 0)
    assert run.value == 6.0
    assert top_h_value(run, obj) == 6.0
    assert bound_top_h(run, obj) == 1.0
    assert brute_force_opt(obj)[1] == 6.0


def test_max_cover_toy():
    obj = max_cover_toy()
    run = greedy(obj)
    assert run.sequence == (0, 1)
    assert run.value == 3.0
    assert run.marginals == (2.0, 1.0)
    assert brute_force_opt(obj)[1] == 3.0


def test_greedy_trap_bounds():
    obj = greedy_trap()
    run = greedy(obj)
    _, optimum = brute_force_opt(obj)
    ratio = run.value / optimum
    assert (run.value, optimum) == (7.0, 8.0)
    assert ratio >= bound_classic()
    assert greedy_curvature(run) == 2.0
    assert math.isclose(bound_greedy_curvature(run, obj), 0.75)
    assert math.isclose(bound_top_h(run, obj), 7.0 / 9.0)
    assert bound_greedy_curvature(run, obj) <= bound_top_h(run, obj) <= ratio


def test_classic_constant():
    assert bound_classic() == CLASSIC_BOUND
    assert math.isclose(CLASSIC_BOUND, 0.6321205588, rel_tol=1e-9)


def test_string_brute_force_with_decaying_strengths():
    obj = weighted_cover_objective([2.0, 1.0], [[0], [1], [0, 1]], SubmodMode.STRING, 2,
                                   strengths=[1.0, 0.5])
    assert math.isclose(obj((0, 1)), 2.5)
    assert math.isclose(obj((0, 2)), 2.5)
    assert brute_force_opt(obj) == ((2, 0), 3.0)


def test_brute_force_set_count_and_budget():
    obj = weighted_cover_objective(np.ones(12), [[i] for i in range(12)], SubmodMode.SET, 3)
    assert enumeration_count(obj) == 220
    assert brute_force_opt(obj) == ((0, 1, 2), 3.0)
    string = weighted_cover_objective(np.ones(12), [[i] for i in range(12)],
                                      SubmodMode.STRING, 3)
    with pytest.raises(BudgetExceededError) as info:
        brute_force_opt(string, budget=100)
    assert info.value.count == 1728


def test_greedy_set_mode_needs_enough_elements():
    with pytest.raises(ValueError):
        greedy(modular_objective([1.0, 2.0], SubmodMode.SET, 3))


def test_objective_must_vanish_on_empty_sequence():
    with pytest.raises(ValueError):
        SubmodObjective(SubmodMode.SET, (0, 1), lambda s: 1.0 + len(s), 1)


def test_degenerate_objectives():
    flat = weighted_cover_objective([0.0], [[0], [0]], SubmodMode.SET, 2)
    with pytest.raises(DegenerateObjectiveError):
        top_h_value(greedy(flat), flat)
    saturated = weighted_cover_objective([1.0], [[0], [0]], SubmodMode.SET, 2)
    with pytest.raises(DegenerateObjectiveError):
        greedy_curvature(greedy(saturated))
    single = modular_objective([1.0, 2.0], SubmodMode.SET, 1)
    assert bound_greedy_curvature(greedy(single), single) == 1.0


def test_marginals_are_nonnegative_and_consistent():
    obj = random_string_cover(3, decaying=True)
    run = greedy(obj)
    assert all(m >= 0.0 for m in run.marginals)
    previous = 0.0
    for value, marginal in zip(run.values, run.marginals):
        assert math.isclose(value - previous, marginal, abs_tol=1e-12)
        previous = value
    assert telescoping_residual(obj, run.sequence) <= 1e-12


def test_cover_objectives_are_submodular():
    report = verify_submodular(greedy_trap(), 0, seed=0)
    assert report.passed and report.exhaustive
    sampled = verify_submodular(random_string_cover(5, horizon=4, decaying=True), 500, seed=1)
    assert sampled.passed and not sampled.exhaustive
    assert sampled.checked == 500


def test_supermodular_toy_fails():
    obj = SubmodObjective(SubmodMode.SET, tuple(range(4)), lambda s: float(len(set(s)) ** 2), 3)
    report = verify_submodular(obj, 0, seed=0)
    assert not report.passed
    assert report.counterexample['property'] == 'diminishing returns'


@pytest.mark.parametrize('seed', range(10))
def test_greedy_as_adp_matches_top_h(seed):
    obj = random_string_cover(seed)
    run = greedy(obj)
    problem = embed_as_horizon_problem(obj)
    scheme = greedy_scheme(problem)
    epsilons = embedded_epsilons(obj, problem, scheme)
    report = assemble_bound(problem, scheme, epsilons, 2, seed=0)
    assert math.isclose(report.bound, top_h_value(run, obj), rel_tol=1e-12)
    assert math.isclose(report.v_hat.mean, run.value, rel_tol=1e-12)


def test_decaying_strengths_tighten_the_embedding_bound():
    obj = random_string_cover(2, decaying=True)
    run = greedy(obj)
    problem = embed_as_horizon_problem(obj)
    scheme = greedy_scheme(problem)
    report = assemble_bound(problem, scheme, embedded_epsilons(obj, problem, scheme), 2, 0,
                            value=ValueEstimate(run.value, 0.0, 0))
    assert report.bound <= top_h_value(run, obj) + 1e-12
    assert report.bound >= brute_force_opt(obj)[1] - 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from(list(SubmodMode)))
def test_bounds_below_true_ratio(seed, mode):
    rng = np.random.default_rng(seed)
    covers = [list(np.flatnonzero(rng.random(7) < 0.4)) or [0] for _ in range(5)]
    obj = weighted_cover_objective(rng.uniform(0.1, 1.0, 7), covers, mode, 3)
    run = greedy(obj)
    ratio = run.value / brute_force_opt(obj)[1]
    assert bound_top_h(run, obj) <= ratio + 1e-12
    try:
        assert bound_greedy_curvature(run, obj) <= ratio + 1e-12
    except DegenerateObjectiveError:
        pass
    assert telescoping_residual(obj, run.sequence) <= 1e-12
    if mode is SubmodMode.SET:
        assert bound_classic() <= ratio + 1e-12


@pytest.mark.parametrize('seed', range(20))
def test_private_cover_bounds(seed):
    obj = private_cover_objective(seed)
    run = greedy(obj)
    sequence, f_opt = brute_force_opt(obj)
    ratio = run.value / f_opt
    beta1 = bound_greedy_curvature(run, obj)
    beta2 = bound_top_h(run, obj)
    assert bound_classic() <= ratio + 1e-12
    assert beta1 <= ratio + 1e-12
    assert beta2 <= ratio + 1e-12
    assert beta1 <= beta2 + 1e-12
    assert np.all(np.nan_to_num(run.candidate_gains[1:], nan=1.0) > 0.0)
    for evaluated in (run.sequence, sequence):
        assert telescoping_residual(obj, evaluated) <= 1e-12


def test_private_cover_rejects_long_horizons():
    with pytest.raises(ValueError):
        private_cover_objective(0, n_elements=3, horizon=4)
    assert private_cover_objective(1, n_elements=3, horizon=3).size == 3
