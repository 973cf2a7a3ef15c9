import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy.optimize import minimize

from model.horizon_model import (
    Action, Direction, DiscreteMdp, ExactSolution, FiniteActions,
    HorizonProblem, SeedLike, State, ValueEstimate, Trajectory,
    as_seed_sequence, estimate_value
)


DEFAULT_MULTISTART = 32
DEFAULT_BOX_MARGIN = 1.25
DEFAULT_INNER_DRAWS = 1000


class StageRangeError(ValueError):
    """
    Raised when a stage index lies outside its valid range.
    """
    def __init__(self, stage: int, low: int, high: int):
        super().__init__(f'Stage {stage} outside the valid range [{low}, {high}].')
        self.stage = stage
        self.low = low
        self.high = high


class DegenerateBoxError(ValueError):
    """
    Raised when a search box has zero or negative width in a coordinate.
    """
    def __init__(self, stage: int | None, coordinate: int):
        where = '' if stage is None else f' for stage {stage}'
        super().__init__(f'Search box{where} is degenerate in coordinate {coordinate}.')
        self.stage = stage
        self.coordinate = coordinate


class NonFiniteDeltaError(ValueError):
    """
    Raised when a stepwise error evaluates to NaN or infinity.
    """
    def __init__(self, stage: int, point: np.ndarray):
        super().__init__(f'Non-finite delta at stage {stage}, point {np.asarray(point).tolist()}.')
        self.stage = stage
        self.point = point


def check_stage(stage: int, low: int, high: int) -> None:
    if not low <= stage <= high:
        raise StageRangeError(stage, low, high)


class AdpScheme:
    """
    Stage-indexed approximate EVTG family and the policy acting greedily on it.

    `w_hat(k, x, mu)` returns W^_{k+1}(x, mu), the approximation used when
    choosing the action at stage k. Q^_k is the stage reward plus W^_{k+1}.

    Subclasses with continuous action sets override `action()`.
    """

    def __init__(self, problem: HorizonProblem,
                 w_hat: Callable[[int, State, Action], float]):
        self.problem = problem
        self._w_hat = w_hat

    @property
    def horizon(self) -> int:
        return self.problem.horizon

    def w_hat(self, stage: int, state: State, action: Action) -> float:
        """
        W^_{stage+1}(state, action).
        """
        check_stage(stage, 0, self.horizon - 1)
        return float(self._w_hat(stage, state, action))

    def q_hat(self, stage: int, state: State, action: Action) -> float:
        """
        Q^_stage(state, action) = r_stage(state, action) + W^_{stage+1}(state, action).
        """
        reward = float(self.problem.stage_reward(stage, state, action))
        return reward + self.w_hat(stage, state, action)

    def action(self, stage: int, state: State) -> Action:
        """
        The ADP action: the best feasible action under Q^_stage.

        Raises:
            TypeError: If the action domain cannot be enumerated.
        """
        domain = self.problem.feasible_actions(stage, state)
        if not isinstance(domain, FiniteActions):
            raise TypeError(
                f'{type(self).__name__} cannot optimize over {type(domain).__name__}; '
                f'override action() for continuous action sets.'
            )
        values = [self.q_hat(stage, state, action) for action in domain]
        return domain.actions[self.problem.direction.arg_opt(values)]

    def best_q_hat(self, stage: int, state: State) -> float:
        """
        opt over feasible actions of Q^_stage(state, .).
        """
        return self.q_hat(stage, state, self.action(stage, state))

    def policy(self, stage: int, state: State) -> Action:
        return self.action(stage, state)


class TabularScheme(AdpScheme):
    """
    ADP scheme on a DiscreteMdp given by tables.

    Attributes:
        mdp: The tabular problem.
        tables: W^_{k+1}(x, mu) for k = 0..H-1, shape (H, X, U).
    """

    def __init__(self, mdp: DiscreteMdp, tables: np.ndarray, name: str = 'custom'):
        tables = np.array(tables, dtype=float)
        if tables.shape != mdp.rewards.shape:
            raise ValueError(f'Scheme tables must have shape {mdp.rewards.shape}, got {tables.shape}.')
        tables.setflags(write=False)
        self.mdp = mdp
        self.tables = tables
        self.name = name
        super().__init__(
            mdp.as_horizon_problem(),
            lambda stage, state, action: self.tables[stage, state, action]
        )

    @classmethod
    def pinned(cls, mdp: DiscreteMdp, tables: np.ndarray, name: str) -> 'TabularScheme':
        """
        Builds a scheme whose last stage equals the exact terminal expectation.
        """
        tables = np.array(tables, dtype=float)
        tables[-1] = mdp.terminal_expectation()
        return cls(mdp, tables, name)

    @classmethod
    def exact(cls, mdp: DiscreteMdp, solution: ExactSolution) -> 'TabularScheme':
        """
        W^ = W*.
        """
        return cls(mdp, solution.w_star, 'exact')

    @classmethod
    def greedy(cls, mdp: DiscreteMdp) -> 'TabularScheme':
        """
        W^ = 0 before the last stage.
        """
        return cls.pinned(mdp, np.zeros_like(mdp.rewards), 'greedy')

    @classmethod
    def noisy(cls, mdp: DiscreteMdp, solution: ExactSolution, scale: float,
              seed: SeedLike) -> 'TabularScheme':
        """
        W^ = W* plus Gaussian noise of the given scale before the last stage.
        """
        rng = np.random.default_rng(as_seed_sequence(seed))
        noise = rng.normal(0.0, scale, size=solution.w_star.shape)
        return cls.pinned(mdp, solution.w_star + noise, f'noisy-{scale:g}')

    def action(self, stage: int, state: State) -> Action:
        mask = self.mdp.feasible[stage, state]
        q = self.mdp.rewards[stage, state] + self.tables[stage, state]
        masked = np.where(mask, q, self.problem.direction.worst)
        return self.problem.direction.arg_opt(masked)

    def q_tables(self) -> np.ndarray:
        """
        Q^_k(x, mu) for all entries, shape (H, X, U).
        """
        return self.mdp.rewards + self.tables

    def policy_table(self) -> np.ndarray:
        """
        ADP action index per (k, x), shape (H, X).
        """
        masked = np.where(self.mdp.feasible, self.q_tables(), self.mdp.direction.worst)
        if self.mdp.direction is Direction.MAXIMIZE:
            return np.argmax(masked, axis=2)
        return np.argmin(masked, axis=2)


class DeltaFunction(Protocol):
    """
    A stepwise error delta_k on the concatenated (state, action) vector.
    Objects may also expose `gradient(point)`.
    """
    def __call__(self, point: np.ndarray) -> float: ...


@dataclass(frozen=True, eq=False)
class SearchBox:
    """
    Compact axis-aligned box over (state, action) coordinates.

    Attributes:
        lower: Lower corner.
        upper: Upper corner.
        stage: Stage the box belongs to, for error messages.
    """
    lower: np.ndarray
    upper: np.ndarray
    stage: int | None = None

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError('Box corners must be vectors of equal length.')
        for coordinate in range(lower.size):
            if not lower[coordinate] < upper[coordinate]:
                raise DegenerateBoxError(self.stage, coordinate)
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @classmethod
    def from_samples(cls, samples: np.ndarray, margin: float = DEFAULT_BOX_MARGIN,
                     stage: int | None = None) -> 'SearchBox':
        """
        Per-coordinate min/max of the samples, inflated around the center.

        Args:
            samples: Points, shape (n, dim).
            margin: Inflation factor of the half widths (>= 1).
            stage: Stage the box belongs to.
        """
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] == 0:
            raise ValueError('Cannot build a search box from zero samples.')
        if margin < 1.0:
            raise ValueError(f'Box margin must be >= 1, got {margin}.')
        low = samples.min(axis=0)
        high = samples.max(axis=0)
        center = (low + high) / 2
        half = (high - low) / 2 * margin
        return cls(center - half, center + half, stage)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2

    def scaled(self, factor: float) -> 'SearchBox':
        """
        The box with its half widths multiplied by `factor`.
        """
        half = (self.upper - self.lower) / 2 * factor
        return SearchBox(self.center - half, self.center + half, self.stage)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def vertices(self) -> np.ndarray:
        """
        All 2^dim corners.
        """
        grid = np.array(np.meshgrid(*zip(self.lower, self.upper), indexing='ij'))
        return grid.reshape(self.dim, -1).T


@dataclass(frozen=True, eq=False)
class StepwiseErrorModel:
    """
    Stepwise error surrogates delta_1..delta_{H-1} with their search boxes.

    Attributes:
        deltas: delta_k at index k-1.
        boxes: Search box of delta_k at index k-1.
        direction: Direction of the underlying problem.
        q0: Optional surrogate of Q^_0 on the same coordinates.
        metadata: Free-form provenance (margin, source of the surrogates).
    """
    deltas: tuple[DeltaFunction, ...]
    boxes: tuple[SearchBox, ...]
    direction: Direction
    q0: DeltaFunction | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.deltas) != len(self.boxes):
            raise ValueError(
                f'Got {len(self.deltas)} deltas but {len(self.boxes)} search boxes.')

    @property
    def horizon(self) -> int:
        return len(self.deltas) + 1

    def delta(self, stage: int) -> DeltaFunction:
        check_stage(stage, 1, self.horizon - 1)
        return self.deltas[stage - 1]

    def box(self, stage: int) -> SearchBox:
        check_stage(stage, 1, self.horizon - 1)
        return self.boxes[stage - 1]


@dataclass(frozen=True, eq=False)
class BoundReport:
    """
    Outcome of the ratio-bound computation for one initial state.

    Attributes:
        v_hat: Monte Carlo value of the ADP policy.
        q_hat_0: Q^_0(x_0, mu^_0).
        epsilons: epsilon_1..epsilon_{H-1}.
        bound: q_hat_0 + sum(epsilons); an upper bound on V* when maximizing
            and a lower bound when minimizing.
        beta: v_hat.mean / bound.
        direction: Optimization direction.
        metadata: Box margin, fallback stages, error source and similar notes.
    """
    v_hat: ValueEstimate
    q_hat_0: float
    epsilons: tuple[float, ...]
    bound: float
    beta: float
    direction: Direction
    metadata: dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def columns(horizon: int) -> list[str]:
        """
        Column order of the flat CSV row.
        """
        return (['v_hat', 'v_hat_stderr', 'q_hat_0']
                + [f'eps_{k}' for k in range(1, horizon)]
                + ['bound', 'beta'])

    def as_row(self) -> dict[str, float]:
        values = ([self.v_hat.mean, self.v_hat.std_error, self.q_hat_0]
                  + list(self.epsilons) + [self.bound, self.beta])
        return dict(zip(self.columns(len(self.epsilons) + 1), values))


def _scheme_tables(mdp: DiscreteMdp, scheme: AdpScheme) -> np.ndarray:
    if isinstance(scheme, TabularScheme):
        return scheme.tables
    tables = np.zeros_like(mdp.rewards)
    for stage in range(mdp.horizon):
        for state in range(mdp.n_states):
            for action in mdp.feasible_indices(stage, state):
                tables[stage, state, action] = scheme.w_hat(stage, state, action)
    return tables


def delta_table(mdp: DiscreteMdp, scheme: AdpScheme, stage: int) -> np.ndarray:
    """
    delta_k(x_{k-1}, mu_{k-1}) for every entry, shape (X, U).

    The inner expectation of opt Q^_k is computed exactly from the kernel.
    Infeasible entries hold NaN.
    """
    check_stage(stage, 1, mdp.horizon - 1)
    direction = mdp.direction
    tables = _scheme_tables(mdp, scheme)

    q_next = mdp.rewards[stage] + tables[stage]
    mask = mdp.feasible[stage]
    best_next = direction.opt_axis(np.where(mask, q_next, direction.worst), axis=1)
    # States without actions must be unreachable; their value never enters
    best_next = np.where(mask.any(axis=1), best_next, 0.0)

    expected = mdp.kernel[stage - 1] @ best_next
    delta = expected - tables[stage - 1]
    return np.where(mdp.feasible[stage - 1], delta, np.nan)


def epsilon_discrete(mdp: DiscreteMdp, scheme: AdpScheme, stage: int) -> float:
    """
    Exact epsilon_k: opt of delta_k over all feasible (x_{k-1}, mu_{k-1}).

    Args:
        mdp: The tabular problem.
        scheme: Any ADP scheme on the problem's state and action indices.
        stage: k in 1..H-1.

    Returns:
        epsilon_k, a max for maximization and a min for minimization.

    Raises:
        StageRangeError: If k is outside 1..H-1.
    """
    delta = delta_table(mdp, scheme, stage)
    values = delta[~np.isnan(delta)]
    epsilon = mdp.direction.opt(values.tolist())
    logging.debug(f'epsilon_{stage} = {epsilon:.6g} (enumerated {values.size} pairs)')
    return float(epsilon)


def epsilons_discrete(mdp: DiscreteMdp, scheme: AdpScheme) -> tuple[float, ...]:
    return tuple(epsilon_discrete(mdp, scheme, stage) for stage in range(1, mdp.horizon))


def epsilon_enumerated(problem: HorizonProblem, scheme: AdpScheme, stage: int,
                       states: Iterable[State]) -> float:
    """
    Exhaustive epsilon_k for a deterministic problem.

    Args:
        problem: A problem whose transition ignores the noise draw.
        scheme: ADP scheme with enumerable action sets.
        stage: k in 1..H-1.
        states: All candidate states x_{k-1}.

    Returns:
        opt of delta_k over the given states and their feasible actions.
    """
    check_stage(stage, 1, problem.horizon - 1)
    direction = problem.direction
    best = direction.worst
    for state in states:
        domain = problem.feasible_actions(stage - 1, state)
        if not isinstance(domain, FiniteActions):
            raise TypeError('epsilon_enumerated needs enumerable action sets.')
        for action in domain:
            following = problem.transition(stage - 1, state, action, None)
            delta = (scheme.best_q_hat(stage, following)
                     - scheme.w_hat(stage - 1, state, action))
            best = direction.opt([best, delta])

    if math.isinf(best):
        raise ValueError(f'No (state, action) pair to enumerate at stage {stage}.')
    return float(best)


def sampled_delta(problem: HorizonProblem, scheme: AdpScheme, stage: int,
                  state: State, action: Action, n_draws: int = DEFAULT_INNER_DRAWS,
                  seed: SeedLike = 0) -> ValueEstimate:
    """
    Monte Carlo estimate of delta_k(x_{k-1}, mu_{k-1}).

    Next states are drawn from the problem's transition; the stepwise error
    is the sample mean of opt Q^_k minus W^_k. Equal seeds give equal draws,
    so comparisons between schemes use common random numbers.

    Returns:
        Mean and standard error of the estimate.
    """
    check_stage(stage, 1, problem.horizon - 1)
    if n_draws < 2:
        raise ValueError(f'n_draws must be >= 2, got {n_draws}.')
    rng = np.random.default_rng(as_seed_sequence(seed))
    values = np.empty(n_draws)
    for draw in range(n_draws):
        noise = problem.noise_sampler(stage - 1, rng)
        following = problem.transition(stage - 1, state, action, noise)
        values[draw] = scheme.best_q_hat(stage, following)
    w_prev = scheme.w_hat(stage - 1, state, action)
    return ValueEstimate(
        float(values.mean()) - w_prev,
        float(values.std(ddof=1)) / math.sqrt(n_draws),
        n_draws
    )


def _evaluate_delta(delta: DeltaFunction, stage: int, point: np.ndarray) -> float:
    value = float(delta(point))
    if not math.isfinite(value):
        raise NonFiniteDeltaError(stage, point)
    return value


def epsilon_continuous(error_model: StepwiseErrorModel, stage: int,
                       starts: int = DEFAULT_MULTISTART, seed: SeedLike = 0) -> float:
    """
    epsilon_k by multi-start local optimization of delta_k over its box.

    The first start is the box center, the others are uniform draws. Deltas
    exposing `gradient()` are optimized with L-BFGS-B, others with Powell.

    Args:
        error_model: The stepwise error surrogates.
        stage: k in 1..H-1.
        starts: Number of starting points (>= 1).
        seed: Seed of the random starting points.

    Returns:
        The best value found (max when maximizing, min when minimizing).

    Raises:
        NonFiniteDeltaError: If delta_k evaluates to NaN or infinity.
    """
    if starts < 1:
        raise ValueError(f'starts must be >= 1, got {starts}.')
    delta = error_model.delta(stage)
    box = error_model.box(stage)
    sign = error_model.direction.sign
    gradient = getattr(delta, 'gradient', None)

    rng = np.random.default_rng(as_seed_sequence(seed))
    points = np.vstack([box.center, box.sample(starts - 1, rng)])
    bounds = list(zip(box.lower, box.upper))

    def objective(point: np.ndarray) -> float:
        return -sign * _evaluate_delta(delta, stage, point)

    if gradient is not None:
        jac = lambda point: -sign * np.asarray(gradient(point), dtype=float)
        options = {'ftol': 1e-15, 'gtol': 1e-12, 'maxiter': 10_000}
        method = 'L-BFGS-B'
    else:
        jac = None
        options = {'xtol': 1e-10, 'ftol': 1e-14, 'maxiter': 20_000}
        method = 'Powell'

    lowest = math.inf
    for point in points:
        lowest = min(lowest, objective(point))
        result = minimize(objective, point, method=method, jac=jac,
                          bounds=bounds, options=options)
        candidate = np.clip(result.x, box.lower, box.upper)
        lowest = min(lowest, objective(candidate))

    epsilon = -sign * lowest
    logging.debug(f'epsilon_{stage} = {epsilon:.6g} ({starts} starts, {method})')
    return float(epsilon)


def epsilons_continuous(error_model: StepwiseErrorModel,
                        starts: int = DEFAULT_MULTISTART,
                        seed: SeedLike = 0) -> tuple[float, ...]:
    """
    epsilon_1..epsilon_{H-1}, each stage with its own spawned seed.
    """
    seeds = as_seed_sequence(seed).spawn(max(error_model.horizon - 1, 1))
    return tuple(
        epsilon_continuous(error_model, stage, starts, seeds[stage - 1])
        for stage in range(1, error_model.horizon)
    )


def assemble_bound(problem: HorizonProblem, scheme: AdpScheme,
                   epsilons: Sequence[float], n_rollouts: int, seed: SeedLike,
                   value: ValueEstimate | None = None,
                   q0_surrogate: Callable[[State, Action], float] | None = None,
                   metadata: dict[str, Any] | None = None) -> BoundReport:
    """
    Assembles the ratio bound for the problem's initial state.

    Args:
        problem: The problem, started at its x_0.
        scheme: The ADP scheme.
        epsilons: epsilon_1..epsilon_{H-1}.
        n_rollouts: Rollouts for the estimate of V^.
        seed: Master seed of the rollouts.
        value: A known value of the ADP policy; skips the rollouts.
        q0_surrogate: Learned Q^_0 evaluated at (x_0, mu^_0) in place of the
            scheme's own Q^_0.
        metadata: Notes copied into the report.

    Returns:
        The report with bound = Q^_0(x_0, mu^_0) + sum(epsilons).
    """
    if len(epsilons) != problem.horizon - 1:
        raise ValueError(
            f'Expected {problem.horizon - 1} epsilons, got {len(epsilons)}.')

    state = problem.initial_state
    first_action = scheme.action(0, state)
    if not problem.feasible_actions(0, state).contains(first_action):
        raise ValueError(f'ADP action {first_action!r} at stage 0 is infeasible.')
    if q0_surrogate is None:
        q_hat_0 = scheme.q_hat(0, state, first_action)
    else:
        q_hat_0 = float(q0_surrogate(state, first_action))

    if value is None:
        value = estimate_value(problem, scheme.policy, n_rollouts, seed)

    bound = q_hat_0 + math.fsum(epsilons)
    if bound == 0.0:
        logging.warning('Bound is zero; the ratio is undefined.')
        beta = math.nan
    else:
        beta = value.mean / bound

    logging.info(
        f'Bound assembled: V^ = {value.mean:.6g} +- {value.std_error:.3g}, '
        f'Q^_0 = {q_hat_0:.6g}, bound = {bound:.6g}, beta = {beta:.6g}'
    )
    return BoundReport(
        v_hat=value,
        q_hat_0=q_hat_0,
        epsilons=tuple(float(e) for e in epsilons),
        bound=bound,
        beta=beta,
        direction=problem.direction,
        metadata=dict(metadata or {})
    )


def telescoping_check(problem: HorizonProblem, scheme: AdpScheme,
                      trajectory: Trajectory) -> float:
    """
    Residual of the telescoping decomposition along one trajectory.

    Sums r_k + W^_{k+1}(x_k, mu_k) - W^_k(x_{k-1}, mu_{k-1}) over the stages,
    with W^_0 = 0, and compares the sum to the realized total.

    Returns:
        The absolute residual.
    """
    if trajectory.horizon != problem.horizon:
        raise ValueError(
            f'Trajectory has {trajectory.horizon} stages, problem has {problem.horizon}.')

    terms = []
    w_prev = 0.0
    for stage in range(problem.horizon):
        state = trajectory.states[stage]
        action = trajectory.actions[stage]
        w_next = scheme.w_hat(stage, state, action)
        terms.append(trajectory.stage_rewards[stage] + w_next - w_prev)
        w_prev = w_next

    return abs(math.fsum(terms) - trajectory.total)
