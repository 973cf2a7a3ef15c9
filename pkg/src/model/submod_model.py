import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations, permutations, product
from typing import Callable, Hashable, Iterator, Sequence

import numpy as np

from model.bound_model import AdpScheme, epsilon_enumerated
from model.horizon_model import (
    Direction, FiniteActions, HorizonProblem, SeedLike, as_seed_sequence
)


Prefix = tuple[int, ...]

DEFAULT_BRUTE_FORCE_BUDGET = 10 ** 6
EXHAUSTIVE_GROUND_SET = 8
EXHAUSTIVE_HORIZON = 3
CLASSIC_BOUND = 1 - math.exp(-1)


class BudgetExceededError(RuntimeError):
    """
    Raised when an enumeration would exceed its budget.
    """
    def __init__(self, count: int, budget: int):
        super().__init__(f'Enumeration needs {count} evaluations, budget is {budget}.')
        self.count = count
        self.budget = budget


class DegenerateObjectiveError(ValueError):
    """
    Raised when a bound is undefined for an objective (e.g. all singletons zero).
    """


class SubmodMode(Enum):
    SET = 'set'
    STRING = 'string'


@dataclass(frozen=True, eq=False)
class SubmodObjective:
    """
    Monotone submodular objective over sequences of ground-set indices.

    In SET mode sequences have no repeats and the value ignores their
    order; in STRING mode repeats are allowed and the order matters.

    Attributes:
        mode: SET or STRING.
        ground_set: Element labels; sequences refer to their indices.
        evaluate: f(sequence) for index tuples.
        horizon: Sequence length budget H.
        batch_evaluate: Optional f(prefix + (s,)) for many candidates s at once.
    """
    mode: SubmodMode
    ground_set: tuple[Hashable, ...]
    evaluate: Callable[[Prefix], float]
    horizon: int
    batch_evaluate: Callable[[Prefix, Sequence[int]], np.ndarray] | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f'Horizon must be >= 1, got {self.horizon}.')
        if len(self.ground_set) == 0:
            raise ValueError('Ground set must not be empty.')
        empty = float(self.evaluate(()))
        if abs(empty) > 1e-12:
            raise ValueError(f'f of the empty sequence must be 0, got {empty}.')

    @property
    def size(self) -> int:
        return len(self.ground_set)

    def __call__(self, sequence: Sequence[int]) -> float:
        return float(self.evaluate(tuple(sequence)))

    def candidates(self, prefix: Prefix) -> list[int]:
        """
        Elements that may extend the prefix.
        """
        if self.mode is SubmodMode.SET:
            return [s for s in range(self.size) if s not in prefix]
        return list(range(self.size))

    def extended_values(self, prefix: Prefix, candidates: Sequence[int]) -> np.ndarray:
        """
        f(prefix + (s,)) for each candidate s.
        """
        if self.batch_evaluate is not None:
            return np.asarray(self.batch_evaluate(prefix, candidates), dtype=float)
        return np.array([self(prefix + (s,)) for s in candidates])


@dataclass(frozen=True, eq=False)
class GreedyRun:
    """
    Outcome of the greedy algorithm.

    Attributes:
        sequence: g_0..g_{H-1}.
        values: f(G_0)..f(G_{H-1}).
        marginals: Marginal gain of each step.
        singleton_values: f((s,)) for every element.
        candidate_gains: Marginal gain of every element at every step,
            shape (H, |U|); NaN for elements that were not candidates.
    """
    sequence: Prefix
    values: tuple[float, ...]
    marginals: tuple[float, ...]
    singleton_values: np.ndarray
    candidate_gains: np.ndarray

    @property
    def value(self) -> float:
        return self.values[-1]


def greedy(obj: SubmodObjective) -> GreedyRun:
    """
    Picks the element with the largest marginal gain at each step.

    Ties go to the lowest element index. SET mode never picks an element
    twice.

    Raises:
        ValueError: In SET mode when the ground set is smaller than H.
    """
    if obj.mode is SubmodMode.SET and obj.size < obj.horizon:
        raise ValueError(
            f'Set mode needs at least H={obj.horizon} elements, got {obj.size}.')

    prefix: Prefix = ()
    current = 0.0
    values, marginals = [], []
    gains = np.full((obj.horizon, obj.size), np.nan)

    for step in range(obj.horizon):
        candidates = obj.candidates(prefix)
        extended = obj.extended_values(prefix, candidates)
        gains[step, candidates] = extended - current
        best = int(np.argmax(np.where(np.isnan(gains[step]), -np.inf, gains[step])))
        prefix = prefix + (best,)
        values.append(float(extended[candidates.index(best)]))
        marginals.append(values[-1] - current)
        current = values[-1]

    singletons = gains[0].copy()
    logging.debug(f'Greedy sequence {prefix} with value {current:.6g}')
    return GreedyRun(
        sequence=prefix,
        values=tuple(values),
        marginals=tuple(marginals),
        singleton_values=singletons,
        candidate_gains=gains
    )


def enumeration_count(obj: SubmodObjective) -> int:
    if obj.mode is SubmodMode.SET:
        return math.comb(obj.size, obj.horizon)
    return obj.size ** obj.horizon


def brute_force_opt(obj: SubmodObjective, budget: int = DEFAULT_BRUTE_FORCE_BUDGET) \
-> tuple[Prefix, float]:
    """
    Exact optimum by enumeration.

    SET mode enumerates the subsets of size H as sorted tuples, STRING mode
    all strings of length H; ties go to the lexicographically smallest.

    Raises:
        BudgetExceededError: If the number of candidates exceeds `budget`.
    """
    count = enumeration_count(obj)
    if count > budget:
        raise BudgetExceededError(count, budget)

    if obj.mode is SubmodMode.SET:
        candidates = combinations(range(obj.size), obj.horizon)
    else:
        candidates = product(range(obj.size), repeat=obj.horizon)

    best_sequence: Prefix = ()
    best_value = -math.inf
    for sequence in candidates:
        value = obj(sequence)
        if value > best_value:
            best_sequence, best_value = sequence, value
    return best_sequence, best_value


def bound_classic() -> float:
    """
    beta_0 = 1 - 1/e.
    """
    return CLASSIC_BOUND


def greedy_curvature(run: GreedyRun) -> float:
    """
    gamma_G: max of f(s) / Delta(G_{k-1} + s) over steps k >= 1 and elements
    with a positive marginal gain.

    Raises:
        DegenerateObjectiveError: If no later step has a positive gain.
    """
    ratios = []
    for step in range(1, run.candidate_gains.shape[0]):
        gains = run.candidate_gains[step]
        positive = np.nan_to_num(gains, nan=0.0) > 0.0
        if positive.any():
            ratios.append(float(np.max(run.singleton_values[positive] / gains[positive])))
    if not ratios:
        raise DegenerateObjectiveError('No step after the first has a positive marginal gain.')
    return max(ratios)


def bound_greedy_curvature(run: GreedyRun, obj: SubmodObjective) -> float:
    """
    beta_1 = 1/H + (H-1) / (H gamma_G); 1 when H = 1.
    """
    horizon = obj.horizon
    if horizon == 1:
        return 1.0
    gamma = greedy_curvature(run)
    return 1 / horizon + (horizon - 1) / (horizon * gamma)


def top_h_value(run: GreedyRun, obj: SubmodObjective) -> float:
    """
    The bound value: the sum of the H largest singleton values in SET mode,
    H times the largest one in STRING mode.

    Raises:
        DegenerateObjectiveError: If the value is zero.
    """
    singletons = np.sort(run.singleton_values)[::-1]
    if obj.mode is SubmodMode.SET:
        value = math.fsum(singletons[:obj.horizon])
    else:
        value = obj.horizon * float(singletons[0])
    if value <= 0.0:
        raise DegenerateObjectiveError('All singleton values are zero.')
    return value


def bound_top_h(run: GreedyRun, obj: SubmodObjective) -> float:
    """
    beta_2 = f(G) / top_h_value.
    """
    return run.value / top_h_value(run, obj)


def telescoping_residual(obj: SubmodObjective, sequence: Sequence[int]) -> float:
    """
    |f(S) - sum of the marginal gains along S|, relative to max(1, |f(S)|).
    """
    sequence = tuple(sequence)
    values = [obj(sequence[:i]) for i in range(len(sequence) + 1)]
    gains = [values[i + 1] - values[i] for i in range(len(sequence))]
    total = values[-1]
    return abs(total - math.fsum(gains)) / max(1.0, abs(total))


@dataclass(frozen=True)
class SubmodularityReport:
    """
    Outcome of a monotonicity and diminishing-returns check.

    Attributes:
        passed: No violation found.
        checked: Number of (X, Y, s) triples checked.
        exhaustive: Whether every triple was enumerated.
        counterexample: The first violation, if any.
    """
    passed: bool
    checked: int
    exhaustive: bool
    counterexample: dict | None = field(default=None)


def _violation(obj: SubmodObjective, small: Prefix, large: Prefix, element: int) \
-> dict | None:
    f_small = obj(small)
    f_large = obj(large)
    gain_small = obj(small + (element,)) - f_small
    gain_large = obj(large + (element,)) - f_large
    tolerance = 1e-12 * max(1.0, abs(f_large), abs(gain_small))
    if gain_small < -tolerance:
        return {'property': 'monotonicity', 'X': small, 's': element, 'gain': gain_small}
    if gain_large < -tolerance:
        return {'property': 'monotonicity', 'X': large, 's': element, 'gain': gain_large}
    if gain_small < gain_large - tolerance:
        return {'property': 'diminishing returns', 'X': small, 'Y': large, 's': element,
                'gain_X': gain_small, 'gain_Y': gain_large}
    return None


def _sub_sequences(obj: SubmodObjective, large: Prefix) -> Iterator[Prefix]:
    # Prefixes in STRING mode, all subsets in SET mode
    if obj.mode is SubmodMode.STRING:
        for length in range(len(large) + 1):
            yield large[:length]
    else:
        for length in range(len(large) + 1):
            yield from combinations(large, length)


def _exhaustive_triples(obj: SubmodObjective) -> Iterator[tuple[Prefix, Prefix, int]]:
    for length in range(obj.horizon):
        if obj.mode is SubmodMode.SET:
            larges = permutations(range(obj.size), length)
        else:
            larges = product(range(obj.size), repeat=length)
        for large in larges:
            for small in _sub_sequences(obj, large):
                for element in obj.candidates(large):
                    yield small, large, element


def verify_submodular(obj: SubmodObjective, n_samples: int, seed: SeedLike) \
-> SubmodularityReport:
    """
    Checks monotonicity and diminishing returns on triples (X, Y, s) with
    X below Y (prefix in STRING mode, subset in SET mode) and |Y| < H.

    Enumerates every triple when |U| <= 8 and H <= 3, samples `n_samples`
    triples otherwise.
    """
    exhaustive = obj.size <= EXHAUSTIVE_GROUND_SET and obj.horizon <= EXHAUSTIVE_HORIZON
    checked = 0

    if exhaustive:
        triples: Iterator[tuple[Prefix, Prefix, int]] = _exhaustive_triples(obj)
    else:
        triples = _sampled_triples(obj, n_samples, seed)

    for small, large, element in triples:
        checked += 1
        violation = _violation(obj, small, large, element)
        if violation is not None:
            logging.info(f'Submodularity check failed after {checked} triples: {violation}')
            return SubmodularityReport(False, checked, exhaustive, violation)

    return SubmodularityReport(True, checked, exhaustive)


def _sampled_triples(obj: SubmodObjective, n_samples: int, seed: SeedLike) \
-> Iterator[tuple[Prefix, Prefix, int]]:
    rng = np.random.default_rng(as_seed_sequence(seed))
    for _ in range(n_samples):
        length = int(rng.integers(0, obj.horizon))
        if obj.mode is SubmodMode.SET:
            length = min(length, obj.size - 1)
            large = tuple(int(s) for s in rng.permutation(obj.size)[:length])
            keep = rng.random(length) < 0.5
            small = tuple(s for s, kept in zip(large, keep) if kept)
        else:
            large = tuple(int(s) for s in rng.integers(0, obj.size, size=length))
            small = large[:int(rng.integers(0, length + 1))]
        candidates = obj.candidates(large)
        yield small, large, int(candidates[int(rng.integers(0, len(candidates)))])


def weighted_cover_objective(weights: Sequence[float], covers: Sequence[Sequence[int]],
                             mode: SubmodMode, horizon: int,
                             strengths: Sequence[float] | None = None,
                             labels: Sequence[Hashable] | None = None) -> SubmodObjective:
    """
    Weighted coverage: element s covers the items in covers[s].

    An element placed at step k covers each of its items with probability
    strengths[k] (1 at every step by default); the value is the expected
    covered weight. Non-increasing strengths keep the objective string
    submodular; an element with an empty cover is a null element.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0.0):
        raise ValueError('Item weights must be non-negative.')
    strength = np.ones(horizon) if strengths is None else np.asarray(strengths, dtype=float)
    if strength.shape != (horizon,) or np.any(strength < 0.0) or np.any(strength > 1.0):
        raise ValueError(f'Need {horizon} strengths in [0, 1].')
    membership = np.zeros((len(covers), weights.size))
    for element, items in enumerate(covers):
        membership[element, list(items)] = 1.0

    def evaluate(sequence: Prefix) -> float:
        missed = np.ones(weights.size)
        for step, element in enumerate(sequence):
            missed = missed * (1.0 - strength[step] * membership[element])
        return float(weights @ (1.0 - missed))

    return SubmodObjective(
        mode=mode,
        ground_set=tuple(labels) if labels is not None else tuple(range(len(covers))),
        evaluate=evaluate,
        horizon=horizon
    )


def private_cover_objective(seed: SeedLike, n_elements: int = 5, n_shared: int = 4,
                            horizon: int = 3, share: float = 0.5) -> SubmodObjective:
    """
    Random SET-mode weighted coverage in which every element also covers a
    private item of positive weight.

    No element ever has a zero marginal gain while it is unselected, so the
    top-H bound dominates the greedy-curvature bound on every instance.

    Args:
        seed: Seed of the weights and the shared covers.
        n_elements: Ground set size.
        n_shared: Number of items any element may cover.
        horizon: Number of picks (<= n_elements).
        share: Probability that an element covers a given shared item.
    """
    if not 1 <= horizon <= n_elements:
        raise ValueError(f'Need 1 <= horizon <= {n_elements}, got {horizon}.')
    rng = np.random.default_rng(as_seed_sequence(seed))
    covers = [
        [n_shared + element] + [int(i) for i in np.flatnonzero(rng.random(n_shared) < share)]
        for element in range(n_elements)
    ]
    weights = rng.uniform(0.1, 1.0, n_shared + n_elements)
    return weighted_cover_objective(weights, covers, SubmodMode.SET, horizon)


def modular_objective(weights: Sequence[float], mode: SubmodMode, horizon: int) \
-> SubmodObjective:
    """
    f(S) = sum of the weights of the elements of S, repeats counted.
    """
    weights = tuple(float(w) for w in weights)
    return SubmodObjective(
        mode=mode,
        ground_set=weights,
        evaluate=lambda sequence: math.fsum(weights[s] for s in sequence),
        horizon=horizon
    )


def embed_as_horizon_problem(obj: SubmodObjective) -> HorizonProblem:
    """
    The objective as a deterministic maximization problem.

    The state is the chosen prefix, the action the next element and the
    stage reward its marginal gain; the terminal reward is zero.
    """
    def feasible(stage: int, prefix: Prefix) -> FiniteActions:
        return FiniteActions(tuple(obj.candidates(prefix)))

    return HorizonProblem(
        horizon=obj.horizon,
        direction=Direction.MAXIMIZE,
        initial_state=(),
        transition=lambda stage, prefix, element, noise: prefix + (element,),
        noise_sampler=lambda stage, rng: None,
        stage_reward=lambda stage, prefix, element: obj(prefix + (element,)) - obj(prefix),
        terminal_reward=lambda prefix: 0.0,
        feasible_actions=feasible
    )


def embedded_states(obj: SubmodObjective, length: int) -> Iterator[Prefix]:
    """
    Every prefix of the given length reachable in the embedding.
    """
    if obj.mode is SubmodMode.SET:
        return permutations(range(obj.size), length)
    return product(range(obj.size), repeat=length)


def greedy_scheme(problem: HorizonProblem) -> AdpScheme:
    """
    The greedy algorithm as an ADP scheme: W^ = 0.
    """
    return AdpScheme(problem, lambda stage, state, action: 0.0)


def embedded_epsilons(obj: SubmodObjective, problem: HorizonProblem,
                      scheme: AdpScheme) -> tuple[float, ...]:
    """
    Exhaustive epsilon_1..epsilon_{H-1} of the embedding.
    """
    return tuple(
        epsilon_enumerated(problem, scheme, stage, embedded_states(obj, stage - 1))
        for stage in range(1, obj.horizon)
    )
