import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum, auto
from pathlib import Path
from typing import Any, Callable, Hashable, Iterable, Sequence

import numpy as np


State = Any
Action = Any
Policy = Callable[[int, State], Action]
SeedLike = int | np.random.SeedSequence

PROBABILITY_TOLERANCE = 1e-12


class Direction(Enum):
    """
    Optimization direction of a problem.

    Every "max" of the maximization theory becomes a "min" for cost problems,
    so all optimization steps go through `opt()` and `arg_opt()`.
    """
    MAXIMIZE = auto()
    MINIMIZE = auto()

    def opt(self, values: Iterable[float]) -> float:
        """
        Returns the best of the given values.
        """
        values = list(values)
        return max(values) if self is Direction.MAXIMIZE else min(values)

    def arg_opt(self, values: Sequence[float] | np.ndarray) -> int:
        """
        Returns the index of the best value; ties go to the lowest index.
        """
        array = np.asarray(values, dtype=float)
        if self is Direction.MAXIMIZE:
            return int(np.argmax(array))
        return int(np.argmin(array))

    def opt_axis(self, values: np.ndarray, axis: int) -> np.ndarray:
        """
        Best values of an array along an axis.
        """
        if self is Direction.MAXIMIZE:
            return np.max(values, axis=axis)
        return np.min(values, axis=axis)

    @property
    def worst(self) -> float:
        """
        The value that loses against every finite value.
        """
        return -math.inf if self is Direction.MAXIMIZE else math.inf

    @property
    def sign(self) -> float:
        """
        +1 for maximization, -1 for minimization.
        """
        return 1.0 if self is Direction.MAXIMIZE else -1.0

    def flipped(self) -> 'Direction':
        if self is Direction.MAXIMIZE:
            return Direction.MINIMIZE
        return Direction.MAXIMIZE


class InfeasibleStageError(ValueError):
    """
    Raised when a reachable state has no feasible action.

    Attributes:
        stage: The stage index k.
        state: The state x_k without feasible actions.
    """
    def __init__(self, stage: int, state: State):
        super().__init__(f'No feasible action at stage {stage}, state {state!r}.')
        self.stage = stage
        self.state = state


class InfeasibleActionError(ValueError):
    """
    Raised when a policy returns an action outside U_k(x_k).

    Attributes:
        stage: The stage index k.
        state: The visited state.
        action: The rejected action.
    """
    def __init__(self, stage: int, state: State, action: Action):
        super().__init__(
            f'Policy returned infeasible action {action!r} at stage {stage}, '
            f'state {state!r}.'
        )
        self.stage = stage
        self.state = state
        self.action = action


class MdpFormatError(ValueError):
    """
    Raised when a tabular MDP file cannot be parsed.
    """


class ActionDomain(ABC):
    """
    Descriptor of a feasible action set U_k(x_k).
    """

    @abstractmethod
    def contains(self, action: Action) -> bool:
        """
        Checks whether an action belongs to the domain.
        """


@dataclass(slots=True, frozen=True)
class FiniteActions(ActionDomain):
    """
    Enumerated action set. The tuple order defines the tie-breaking order.

    Attributes:
        actions: The feasible actions, lowest index first.
    """
    actions: tuple[Hashable, ...]

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError('A finite action domain needs at least one action.')

    def contains(self, action: Action) -> bool:
        return action in self.actions

    def __iter__(self):
        return iter(self.actions)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(slots=True, frozen=True)
class EuclideanActions(ActionDomain):
    """
    Continuous action set, all of R^dim or an axis-aligned box.

    Attributes:
        dim: Action dimension.
        lower: Optional lower bounds per coordinate.
        upper: Optional upper bounds per coordinate.
    """
    dim: int
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def contains(self, action: Action) -> bool:
        vector = np.asarray(action, dtype=float)
        if vector.shape != (self.dim,) or not np.all(np.isfinite(vector)):
            return False
        if self.lower is not None and np.any(vector < np.asarray(self.lower)):
            return False
        if self.upper is not None and np.any(vector > np.asarray(self.upper)):
            return False
        return True


@dataclass(slots=True, frozen=True)
class HorizonProblem:
    """
    Finite-horizon stochastic optimal control problem.

    The state evolves as x_{k+1} = transition(k, x_k, mu_k, w_k) with i.i.d.
    noise draws w_k and the objective is the expected sum of the stage
    rewards plus the terminal reward.

    Attributes:
        horizon: Number of decision stages H (stages 0..H-1).
        direction: Whether the objective is maximized or minimized.
        initial_state: The given state x_0.
        transition: (k, x, mu, w) -> next state.
        noise_sampler: (k, rng) -> noise draw w_k.
        stage_reward: (k, x, mu) -> r_k(x, mu).
        terminal_reward: x_H -> r_H(x_H).
        feasible_actions: (k, x) -> ActionDomain U_k(x).
    """
    horizon: int
    direction: Direction
    initial_state: State
    transition: Callable[[int, State, Action, Any], State]
    noise_sampler: Callable[[int, np.random.Generator], Any]
    stage_reward: Callable[[int, State, Action], float]
    terminal_reward: Callable[[State], float]
    feasible_actions: Callable[[int, State], ActionDomain]

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f'Horizon must be >= 1, got {self.horizon}.')

    def with_initial_state(self, state: State) -> 'HorizonProblem':
        """
        Returns a copy of the problem starting at another x_0.
        """
        return replace(self, initial_state=state)


@dataclass(slots=True, frozen=True)
class Trajectory:
    """
    One realization of the state path under a policy.

    Attributes:
        states: x_0..x_H.
        actions: mu_0..mu_{H-1}.
        stage_rewards: r_0..r_{H-1}.
        terminal_reward: r_H(x_H).
        total: Sum of the stage rewards and the terminal reward.
    """
    states: tuple[State, ...]
    actions: tuple[Action, ...]
    stage_rewards: tuple[float, ...]
    terminal_reward: float
    total: float

    def __post_init__(self):
        horizon = len(self.actions)
        if len(self.states) != horizon + 1 or len(self.stage_rewards) != horizon:
            raise ValueError(
                f'Inconsistent trajectory lengths: {len(self.states)} states, '
                f'{horizon} actions, {len(self.stage_rewards)} rewards.'
            )

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass(slots=True, frozen=True)
class ValueEstimate:
    """
    Monte Carlo estimate of a policy's expected total.

    Attributes:
        mean: Empirical mean of the rollout totals.
        std_error: Sample standard deviation divided by sqrt(n).
        n_rollouts: Number of rollouts.
    """
    mean: float
    std_error: float
    n_rollouts: int


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    """
    Returns a fresh seed sequence for a seed.

    Spawning mutates a SeedSequence, so a copy is made to keep repeated calls
    with the same seed object reproducible.

    Args:
        seed: An integer or a seed sequence.

    Returns:
        A seed sequence that has not spawned any children yet.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(int(seed))


def spawn_seeds(seed: SeedLike, count: int) -> list[np.random.SeedSequence]:
    """
    Derives `count` independent child seeds from a master seed.
    """
    return as_seed_sequence(seed).spawn(count)


def rollout(problem: HorizonProblem, policy: Policy, seed: SeedLike) \
-> Trajectory:
    """
    Simulates the problem once under a deterministic policy.

    Args:
        problem: The problem to simulate.
        policy: Stage-indexed action rule (k, x) -> mu.
        seed: Randomness source; equal seeds give identical trajectories.

    Returns:
        The realized trajectory.

    Raises:
        InfeasibleActionError: If the policy leaves U_k(x_k).
    """
    rng = np.random.default_rng(as_seed_sequence(seed))
    state = problem.initial_state
    states = [state]
    actions = []
    rewards = []

    for stage in range(problem.horizon):
        action = policy(stage, state)
        if not problem.feasible_actions(stage, state).contains(action):
            raise InfeasibleActionError(stage, state, action)
        rewards.append(float(problem.stage_reward(stage, state, action)))
        noise = problem.noise_sampler(stage, rng)
        state = problem.transition(stage, state, action, noise)
        actions.append(action)
        states.append(state)

    terminal = float(problem.terminal_reward(state))
    return Trajectory(
        states=tuple(states),
        actions=tuple(actions),
        stage_rewards=tuple(rewards),
        terminal_reward=terminal,
        total=math.fsum(rewards) + terminal
    )


def estimate_value(problem: HorizonProblem, policy: Policy, n_rollouts: int,
                   seed: SeedLike) -> ValueEstimate:
    """
    Estimates the expected total of a policy by seeded rollouts.

    Each rollout gets its own child seed spawned from `seed`.

    Args:
        problem: The problem to simulate.
        policy: Stage-indexed action rule.
        n_rollouts: Number of rollouts (>= 2).
        seed: Master seed.

    Returns:
        Mean and standard error of the rollout totals.
    """
    if n_rollouts < 2:
        raise ValueError(f'n_rollouts must be >= 2, got {n_rollouts}.')

    totals = np.array([
        rollout(problem, policy, child).total
        for child in spawn_seeds(seed, n_rollouts)
    ])

    # Zero-noise problems must report an exact zero error
    if np.ptp(totals) == 0.0:
        return ValueEstimate(float(totals[0]), 0.0, n_rollouts)

    mean = math.fsum(totals) / n_rollouts
    std_error = float(np.std(totals, ddof=1)) / math.sqrt(n_rollouts)
    return ValueEstimate(mean, std_error, n_rollouts)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DiscreteMdp:
    """
    Finite instantiation of the control problem with tabular data.

    Attributes:
        kernel: Transition probabilities p(x' | k, x, mu), shape (H, X, U, X).
        rewards: Stage rewards r_k(x, mu), shape (H, X, U).
        terminal: Terminal rewards r_H(x), shape (X,).
        feasible: Feasibility table, shape (H, X, U).
        initial_state: Index of x_0.
        direction: Optimization direction.
    """
    kernel: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    feasible: np.ndarray
    initial_state: int = 0
    direction: Direction = Direction.MAXIMIZE

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        terminal = np.asarray(self.terminal, dtype=float)
        feasible = np.asarray(self.feasible, dtype=bool)

        if kernel.ndim != 4 or kernel.shape[1] != kernel.shape[3]:
            raise ValueError(f'Kernel must have shape (H, X, U, X), got {kernel.shape}.')
        horizon, n_states, n_actions, _ = kernel.shape
        if horizon < 1:
            raise ValueError('Horizon must be >= 1.')
        if rewards.shape != (horizon, n_states, n_actions):
            raise ValueError(f'Rewards must have shape {(horizon, n_states, n_actions)}.')
        if terminal.shape != (n_states,):
            raise ValueError(f'Terminal rewards must have shape {(n_states,)}.')
        if feasible.shape != (horizon, n_states, n_actions):
            raise ValueError(f'Feasibility must have shape {(horizon, n_states, n_actions)}.')
        if np.any(kernel < 0.0) or np.any(kernel > 1.0):
            raise ValueError('Transition probabilities must lie in [0, 1].')
        row_error = np.max(np.abs(kernel.sum(axis=3) - 1.0))
        if row_error > PROBABILITY_TOLERANCE:
            raise ValueError(f'Kernel rows must sum to 1 (max error {row_error:.3e}).')
        if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(terminal))):
            raise ValueError('Rewards must be finite.')
        if not 0 <= self.initial_state < n_states:
            raise ValueError(f'Initial state {self.initial_state} out of range.')

        object.__setattr__(self, 'kernel', _readonly(kernel))
        object.__setattr__(self, 'rewards', _readonly(rewards))
        object.__setattr__(self, 'terminal', _readonly(terminal))
        object.__setattr__(self, 'feasible', _readonly(feasible))

    @property
    def horizon(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_states(self) -> int:
        return self.kernel.shape[1]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[2]

    def feasible_indices(self, stage: int, state: int) -> tuple[int, ...]:
        return tuple(int(a) for a in np.flatnonzero(self.feasible[stage, state]))

    def terminal_expectation(self) -> np.ndarray:
        """
        E[r_H(x_H) | x_{H-1}, mu], shape (X, U).
        """
        return self.kernel[-1] @ self.terminal

    def mirrored(self) -> 'DiscreteMdp':
        """
        Returns the instance with negated rewards and flipped direction.
        """
        return DiscreteMdp(
            kernel=self.kernel,
            rewards=-self.rewards,
            terminal=-self.terminal,
            feasible=self.feasible,
            initial_state=self.initial_state,
            direction=self.direction.flipped()
        )

    def as_horizon_problem(self) -> HorizonProblem:
        """
        Wraps the tables as a sampling problem (inverse-CDF transitions).
        """
        cumulative = np.cumsum(self.kernel, axis=3)

        def transition(stage: int, state: int, action: int, noise: float) -> int:
            row = cumulative[stage, state, action]
            index = int(np.searchsorted(row, noise, side='right'))
            return min(index, self.n_states - 1)

        return HorizonProblem(
            horizon=self.horizon,
            direction=self.direction,
            initial_state=self.initial_state,
            transition=transition,
            noise_sampler=lambda stage, rng: float(rng.random()),
            stage_reward=lambda stage, state, action: float(
                self.rewards[stage, state, action]
            ),
            terminal_reward=lambda state: float(self.terminal[state]),
            feasible_actions=lambda stage, state: FiniteActions(
                self.feasible_indices(stage, state)
            )
        )


@dataclass(frozen=True, eq=False)
class ExactSolution:
    """
    Exact backward-induction tables of a DiscreteMdp.

    Attributes:
        v_star: V*_k(x) for k = 0..H, shape (H+1, X).
        q_star: Q*_k(x, mu) for k = 0..H-1, shape (H, X, U).
        w_star: W*_{k+1}(x, mu) for k = 0..H-1, shape (H, X, U).
        policy: Optimal action indices pi*_k(x), shape (H, X); -1 where a state
            has no feasible action and cannot be reached.
        v_star_total: V* = V*_0(x_0).
    """
    v_star: np.ndarray
    q_star: np.ndarray
    w_star: np.ndarray
    policy: np.ndarray
    v_star_total: float

    def policy_rule(self) -> Policy:
        """
        The optimal policy as a (k, x) -> mu rule.
        """
        return lambda stage, state: int(self.policy[stage, state])


def reachable_states(mdp: DiscreteMdp) -> np.ndarray:
    """
    Boolean table (H+1, X) of the states reachable from x_0 under feasible
    actions with positive probability.
    """
    reach = np.zeros((mdp.horizon + 1, mdp.n_states), dtype=bool)
    reach[0, mdp.initial_state] = True
    for stage in range(mdp.horizon):
        for state in np.flatnonzero(reach[stage]):
            actions = mdp.feasible[stage, state]
            successors = mdp.kernel[stage, state, actions].sum(axis=0) > 0.0
            reach[stage + 1] |= successors
    return reach


def solve_exact(mdp: DiscreteMdp) -> ExactSolution:
    """
    Solves the MDP by backward induction over k = H-1..0.

    Args:
        mdp: The tabular problem.

    Returns:
        The exact V*, Q*, W* tables and the optimal policy (ties broken by the
        lowest action index).

    Raises:
        InfeasibleStageError: If a reachable state has no feasible action.
    """
    direction = mdp.direction
    reach = reachable_states(mdp)
    horizon, n_states, n_actions = mdp.horizon, mdp.n_states, mdp.n_actions

    v_star = np.zeros((horizon + 1, n_states))
    q_star = np.zeros((horizon, n_states, n_actions))
    w_star = np.zeros((horizon, n_states, n_actions))
    policy = np.full((horizon, n_states), -1, dtype=int)
    v_star[horizon] = mdp.terminal

    for stage in range(horizon - 1, -1, -1):
        w_star[stage] = mdp.kernel[stage] @ v_star[stage + 1]
        q_star[stage] = mdp.rewards[stage] + w_star[stage]

        for state in range(n_states):
            mask = mdp.feasible[stage, state]
            if not mask.any():
                if reach[stage, state]:
                    raise InfeasibleStageError(stage, state)
                continue
            masked = np.where(mask, q_star[stage, state], direction.worst)
            best = direction.arg_opt(masked)
            policy[stage, state] = best
            v_star[stage, state] = q_star[stage, state, best]

    logging.debug(
        f'Solved MDP with {n_states} states, {n_actions} actions, H={horizon}: '
        f'V* = {v_star[0, mdp.initial_state]:.6g}'
    )
    return ExactSolution(
        v_star=_readonly(v_star),
        q_star=_readonly(q_star),
        w_star=_readonly(w_star),
        policy=_readonly(policy),
        v_star_total=float(v_star[0, mdp.initial_state])
    )


def evaluate_policy_exact(mdp: DiscreteMdp, policy_table: np.ndarray) -> float:
    """
    Exact expected total of a deterministic Markov policy.

    Args:
        mdp: The tabular problem.
        policy_table: Action index per (k, x), shape (H, X).

    Returns:
        The expected total from x_0.
    """
    values = np.array(mdp.terminal, dtype=float)
    states = np.arange(mdp.n_states)
    for stage in range(mdp.horizon - 1, -1, -1):
        actions = np.asarray(policy_table[stage], dtype=int)
        values = (mdp.rewards[stage, states, actions]
                  + mdp.kernel[stage, states, actions] @ values)
    return float(values[mdp.initial_state])


def random_mdp(n_states: int, n_actions: int, horizon: int, seed: SeedLike,
               direction: Direction = Direction.MAXIMIZE) -> DiscreteMdp:
    """
    Draws a random instance for oracle tests.

    Rewards are Uniform(0, 1); every kernel row is a normalized vector of
    Uniform(0, 1) draws; all actions are feasible everywhere, so the action
    sets do not depend on the state.

    Args:
        n_states: |X|.
        n_actions: |U|.
        horizon: H.
        seed: Randomness source.
        direction: Optimization direction of the instance.

    Returns:
        The random DiscreteMdp starting in state 0.
    """
    rng = np.random.default_rng(as_seed_sequence(seed))
    raw = rng.random((horizon, n_states, n_actions, n_states))
    kernel = raw / raw.sum(axis=3, keepdims=True)
    rewards = rng.random((horizon, n_states, n_actions))
    terminal = rng.random(n_states)
    feasible = np.ones((horizon, n_states, n_actions), dtype=bool)
    return DiscreteMdp(kernel, rewards, terminal, feasible, 0, direction)


def write_mdp(mdp: DiscreteMdp, path: str | Path) -> None:
    """
    Writes the MDP in the plain-text tabular format.

    Layout (whitespace separated):
        n_states n_actions H x0 direction
        H*X*U kernel rows with X probabilities each (order k, x, mu)
        H*X reward rows with U values each (order k, x)
        1 terminal row with X values
        H*X feasibility rows with U 0/1 flags each (order k, x)
    """
    lines = [
        f'{mdp.n_states} {mdp.n_actions} {mdp.horizon} {mdp.initial_state} '
        f'{mdp.direction.name.lower()}'
    ]
    for row in mdp.kernel.reshape(-1, mdp.n_states):
        lines.append(' '.join(repr(float(p)) for p in row))
    for row in mdp.rewards.reshape(-1, mdp.n_actions):
        lines.append(' '.join(repr(float(r)) for r in row))
    lines.append(' '.join(repr(float(r)) for r in mdp.terminal))
    for row in mdp.feasible.reshape(-1, mdp.n_actions):
        lines.append(' '.join('1' if flag else '0' for flag in row))

    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')
    logging.info(f'Wrote MDP to {path}.')


def read_mdp(path: str | Path) -> DiscreteMdp:
    """
    Reads an MDP written by `write_mdp()`.

    Raises:
        MdpFormatError: If the file does not follow the format, or if a state
            reachable from x_0 has no feasible action.
    """
    numbered = [(number, line.split()) for number, line in
                enumerate(Path(path).read_text(encoding='utf-8').splitlines(), 1)
                if line.strip()]
    rows = [row for _, row in numbered]
    if not rows or len(rows[0]) != 5:
        raise MdpFormatError(f'{path}: header must be "n_states n_actions H x0 direction".')

    try:
        n_states, n_actions, horizon, initial = (int(v) for v in rows[0][:4])
        direction = Direction[rows[0][4].upper()]
    except (ValueError, KeyError) as error:
        raise MdpFormatError(f'{path}: invalid header {rows[0]}.') from error

    n_kernel = horizon * n_states * n_actions
    n_reward = horizon * n_states
    expected = 1 + n_kernel + n_reward + 1 + n_reward
    if len(rows) != expected:
        raise MdpFormatError(f'{path}: expected {expected} rows, found {len(rows)}.')

    def block(start: int, count: int, width: int) -> np.ndarray:
        for number, row in numbered[start:start + count]:
            if len(row) != width:
                raise MdpFormatError(f'{path}: line {number} needs {width} values.')
        return np.array(rows[start:start + count], dtype=float)

    kernel = block(1, n_kernel, n_states)
    rewards = block(1 + n_kernel, n_reward, n_actions)
    terminal = block(1 + n_kernel + n_reward, 1, n_states)[0]
    feasible_start = 2 + n_kernel + n_reward
    feasible = block(feasible_start, n_reward, n_actions)

    mdp = DiscreteMdp(
        kernel=kernel.reshape(horizon, n_states, n_actions, n_states),
        rewards=rewards.reshape(horizon, n_states, n_actions),
        terminal=terminal,
        feasible=feasible.reshape(horizon, n_states, n_actions) > 0.5,
        initial_state=initial,
        direction=direction
    )
    stuck = reachable_states(mdp)[:-1] & ~mdp.feasible.any(axis=2)
    if stuck.any():
        stage, state = (int(i) for i in np.argwhere(stuck)[0])
        number = numbered[feasible_start + stage * n_states + state][0]
        raise MdpFormatError(f'{path}: line {number}: reachable state {state} at stage '
                             f'{stage} has no feasible action.')
    return mdp
