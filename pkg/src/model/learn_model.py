import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import block_diag

from model.bound_model import (
    DEFAULT_BOX_MARGIN, AdpScheme, SearchBox, StepwiseErrorModel, check_stage
)
from model.horizon_model import Direction, HorizonProblem, SeedLike, as_seed_sequence
from model.lqg_model import (
    LqgModel, RiccatiSolution, evtg_exact, lqg_as_horizon_problem,
    next_state_mean, q_exact
)


DEFAULT_ACTION_BOUND = 1e4
INNER_CHUNK = 256
FALLBACK_DRAWS = 256


class RankDeficientError(ValueError):
    """
    Raised when an unregularized design matrix does not have full column rank.
    """
    def __init__(self, rank: int, n_features: int):
        super().__init__(
            f'Design matrix has rank {rank} < {n_features} features; '
            f'use a ridge penalty > 0 or more varied inputs.'
        )
        self.rank = rank
        self.n_features = n_features


class NonDefiniteBlockError(ValueError):
    """
    Raised when the action block of a quadratic Q^_k is not positive definite.
    """
    def __init__(self, stage: int | None):
        where = 'the quadratic' if stage is None else f'stage {stage}'
        super().__init__(f'Action block of {where} is not positive definite.')
        self.stage = stage


class LabelKind(Enum):
    EVTG = 'evtg'
    Q_ZERO = 'q_zero'
    DELTA = 'delta'


@dataclass(frozen=True, eq=False)
class DemoCluster:
    """
    Records of one stage.

    Attributes:
        stage: Stage of the inputs (z_stage, mu_stage).
        states: Error states, shape (n, 4).
        actions: Recorded actions, shape (n, 2).
        labels: Targets, shape (n,).
        label_stderr: Standard errors of sampled labels, or None.
    """
    stage: int
    states: np.ndarray
    actions: np.ndarray
    labels: np.ndarray
    label_stderr: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.labels)
        if self.states.shape[0] != n or self.actions.shape[0] != n:
            raise ValueError(f'Cluster {self.stage} has inconsistent record counts.')

    @property
    def inputs(self) -> np.ndarray:
        """
        Concatenated (state, action) vectors, shape (n, 6).
        """
        return np.hstack([self.states, self.actions])

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class DemoDataset:
    """
    Expert demonstrations grouped by stage.

    EVTG clusters hold W*_{k+1}(z_k, mu_k) for k = 0..H-1; the Q_ZERO
    cluster holds Q*_0(z_0, mu_0); DELTA clusters hold delta_k at the inputs
    (z_{k-1}, mu_{k-1}) for k = 1..H-1, stored under stage k-1.

    Attributes:
        kind: Label kind of every record.
        clusters: Clusters ordered by stage.
        provenance: Seed, trajectory count and initial-state distribution.
    """
    kind: LabelKind
    clusters: tuple[DemoCluster, ...]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        sizes = {len(cluster) for cluster in self.clusters}
        if len(sizes) > 1:
            raise ValueError(f'Cluster sizes differ across stages: {sorted(sizes)}.')

    def cluster(self, stage: int) -> DemoCluster:
        for cluster in self.clusters:
            if cluster.stage == stage:
                return cluster
        raise KeyError(f'No {self.kind.value} cluster at stage {stage}.')

    @property
    def n_records(self) -> int:
        return len(self.clusters[0]) if self.clusters else 0


def _spread_matrix(init_spread: float | np.ndarray, dim: int) -> np.ndarray:
    spread = np.asarray(init_spread, dtype=float)
    if spread.ndim == 0:
        spread = spread * np.eye(dim)
    if spread.shape != (dim, dim):
        raise ValueError(f'Initial spread must be a scalar or a {dim}x{dim} matrix.')
    if not np.allclose(spread, spread.T, atol=1e-12):
        raise ValueError('Initial spread covariance must be symmetric.')
    if np.linalg.eigvalsh(spread).min() < -1e-12:
        raise ValueError('Initial spread covariance must be positive semidefinite.')
    return spread


def _delta_labels_closed(model: LqgModel, sol: RiccatiSolution, stage: int,
                         z_prev: np.ndarray, mu_prev: np.ndarray) -> np.ndarray:
    # Q*_k(z, -K_k z) is the quadratic z^T G z plus a constant
    gain = sol.k_seq[stage]
    closed = model.a_matrix - model.b_matrix @ gain
    p_next = sol.p_seq[stage + 1]
    g = model.q_state + gain.T @ model.r_control @ gain + closed.T @ p_next @ closed
    constant = float(np.trace(p_next @ model.noise_cov)) + sol.c_seq[stage + 1]

    mean = next_state_mean(model, z_prev, mu_prev)
    expected = (np.einsum('ni,ij,nj->n', mean, g, mean)
                + np.trace(g @ model.noise_cov) + constant)
    return expected - evtg_exact(sol, model, stage, z_prev, mu_prev)


def _delta_labels_sampled(model: LqgModel, sol: RiccatiSolution, stage: int,
                          z_prev: np.ndarray, mu_prev: np.ndarray, draws: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    scale = np.sqrt(np.asarray(model.sigma_diag))
    gain = sol.k_seq[stage]
    mean = next_state_mean(model, z_prev, mu_prev)
    labels = np.empty(len(mean))
    stderr = np.empty(len(mean))

    for start in range(0, len(mean), INNER_CHUNK):
        chunk = mean[start:start + INNER_CHUNK]
        following = chunk[:, None, :] + rng.standard_normal((len(chunk), draws, 4)) * scale
        values = q_exact(sol, model, stage, following, -following @ gain.T)
        labels[start:start + len(chunk)] = values.mean(axis=1)
        stderr[start:start + len(chunk)] = values.std(axis=1, ddof=1) / math.sqrt(draws)

    labels -= evtg_exact(sol, model, stage, z_prev, mu_prev)
    return labels, stderr


def generate_demos(model: LqgModel, sol: RiccatiSolution, n_traj: int,
                   init_spread: float | np.ndarray, label_kind: LabelKind,
                   seed: SeedLike, action_dither: float = 0.0,
                   sampled: bool = False, inner_draws: int = 1000) -> DemoDataset:
    """
    Simulates optimal trajectories and labels their state-action pairs.

    Initial states are drawn from N(x_0, init_spread) and every trajectory
    follows mu = -K_k z. With `action_dither` > 0 the recorded action is the
    expert action plus N(0, dither^2 I) noise while the path itself still
    follows the expert, which makes the action dependence of the labels
    identifiable. Equal seeds give equal trajectories for every label kind.

    Args:
        model: The LQG model.
        sol: Its Riccati solution.
        n_traj: Number of trajectories.
        init_spread: Initial-state covariance, or a scalar multiple of I.
        label_kind: Which quantity to record.
        seed: Randomness source.
        action_dither: Standard deviation of the recorded-action noise.
        sampled: For DELTA labels, estimate the inner expectation from
            `inner_draws` samples instead of the closed form.
        inner_draws: Sample count of the sampled DELTA labels.

    Returns:
        The labelled dataset.
    """
    if n_traj < 1:
        raise ValueError(f'n_traj must be >= 1, got {n_traj}.')
    if action_dither < 0.0:
        raise ValueError(f'action_dither must be >= 0, got {action_dither}.')
    spread = _spread_matrix(init_spread, model.state_dim)
    horizon = model.horizon

    init_seed, noise_seed, dither_seed, inner_seed = as_seed_sequence(seed).spawn(4)
    init_rng = np.random.default_rng(init_seed)
    noise_rng = np.random.default_rng(noise_seed)
    dither_rng = np.random.default_rng(dither_seed)
    inner_rng = np.random.default_rng(inner_seed)

    scale = np.sqrt(np.asarray(model.sigma_diag))
    z = init_rng.multivariate_normal(model.initial_error, spread, size=n_traj, method='eigh')
    states = np.empty((horizon + 1, n_traj, 4))
    actions = np.empty((horizon, n_traj, 2))
    states[0] = z

    for stage in range(horizon):
        expert = -z @ sol.k_seq[stage].T
        actions[stage] = expert + action_dither * dither_rng.standard_normal((n_traj, 2))
        z = (z @ model.a_matrix.T + expert @ model.b_matrix.T + model.drift
             + noise_rng.standard_normal((n_traj, 4)) * scale)
        states[stage + 1] = z

    clusters = []
    match label_kind:
        case LabelKind.EVTG:
            for stage in range(horizon):
                labels = evtg_exact(sol, model, stage + 1, states[stage], actions[stage])
                clusters.append(DemoCluster(stage, states[stage], actions[stage], labels))
        case LabelKind.Q_ZERO:
            labels = q_exact(sol, model, 0, states[0], actions[0])
            clusters.append(DemoCluster(0, states[0], actions[0], labels))
        case LabelKind.DELTA:
            for stage in range(1, horizon):
                z_prev, mu_prev = states[stage - 1], actions[stage - 1]
                if sampled:
                    labels, stderr = _delta_labels_sampled(
                        model, sol, stage, z_prev, mu_prev, inner_draws, inner_rng)
                else:
                    labels = _delta_labels_closed(model, sol, stage, z_prev, mu_prev)
                    stderr = None
                clusters.append(DemoCluster(stage - 1, z_prev, mu_prev, labels, stderr))

    logging.info(
        f'Generated {n_traj} demonstrations with {label_kind.value} labels '
        f'({len(clusters)} clusters, dither {action_dither:g}).'
    )
    return DemoDataset(
        kind=label_kind,
        clusters=tuple(clusters),
        provenance={
            'seed': seed if isinstance(seed, int) else repr(seed),
            'n_traj': n_traj,
            'init_mean': model.initial_error.tolist(),
            'init_spread': spread.tolist(),
            'action_dither': action_dither,
            'sampled': sampled,
        }
    )


@dataclass(frozen=True, eq=False)
class QuadraticModel:
    """
    f(v) = v^T quad v + lin . v + const.

    Attributes:
        quad: Symmetric (dim, dim) matrix.
        lin: (dim,) vector.
        const: Constant term.
        train_mse: Mean squared training error, NaN for models not fitted.
    """
    quad: np.ndarray
    lin: np.ndarray
    const: float
    train_mse: float = math.nan

    def __post_init__(self):
        quad = np.array(self.quad, dtype=float)
        lin = np.array(self.lin, dtype=float)
        if quad.ndim != 2 or quad.shape[0] != quad.shape[1] or lin.shape != (quad.shape[0],):
            raise ValueError(f'Incompatible shapes {quad.shape} and {lin.shape}.')
        if not np.allclose(quad, quad.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(quad).max())):
            raise ValueError('Quadratic coefficient matrix must be symmetric.')
        quad = (quad + quad.T) / 2
        quad.setflags(write=False)
        lin.setflags(write=False)
        object.__setattr__(self, 'quad', quad)
        object.__setattr__(self, 'lin', lin)
        object.__setattr__(self, 'const', float(self.const))

    @property
    def dim(self) -> int:
        return self.lin.size

    @classmethod
    def zero(cls, dim: int) -> 'QuadraticModel':
        return cls(np.zeros((dim, dim)), np.zeros(dim), 0.0)

    def __call__(self, point: np.ndarray) -> np.ndarray | float:
        point = np.asarray(point, dtype=float)
        value = (np.einsum('...i,ij,...j->...', point, self.quad, point)
                 + point @ self.lin + self.const)
        return float(value) if np.ndim(value) == 0 else value

    def gradient(self, point: np.ndarray) -> np.ndarray:
        return 2 * np.asarray(point, dtype=float) @ self.quad + self.lin

    def __add__(self, other: 'QuadraticModel') -> 'QuadraticModel':
        return QuadraticModel(self.quad + other.quad, self.lin + other.lin,
                              self.const + other.const)

    def __sub__(self, other: 'QuadraticModel') -> 'QuadraticModel':
        return QuadraticModel(self.quad - other.quad, self.lin - other.lin,
                              self.const - other.const)

    def perturbed(self, scale: float, rng: np.random.Generator) -> 'QuadraticModel':
        """
        Copy with Gaussian noise proportional to each coefficient's magnitude.

        Every coefficient c becomes c (1 + scale * xi) with xi ~ N(0, 1); the
        quadratic part keeps its symmetry.
        """
        if scale < 0.0:
            raise ValueError(f'Perturbation scale must be >= 0, got {scale}.')
        noise = rng.standard_normal(self.quad.shape)
        noise = np.triu(noise) + np.triu(noise, 1).T
        return QuadraticModel(
            self.quad * (1 + scale * noise),
            self.lin * (1 + scale * rng.standard_normal(self.dim)),
            self.const * (1 + scale * float(rng.standard_normal()))
        )

    def blocks(self, split: int) -> tuple[np.ndarray, np.ndarray, np.ndarray,
                                          np.ndarray, np.ndarray]:
        """
        (M_zz, M_zmu, M_mumu, l_z, l_mu) for inputs (z, mu) with z = v[:split].
        """
        q = self.quad
        return q[:split, :split], q[:split, split:], q[split:, split:], \
            self.lin[:split], self.lin[split:]


def _feature_pairs(dim: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def n_quadratic_features(dim: int) -> int:
    return dim * (dim + 1) // 2 + dim + 1


def fit_quadratic(inputs: np.ndarray | DemoCluster, labels: np.ndarray | None = None,
                  ridge: float = 0.0) -> QuadraticModel:
    """
    Least-squares fit of a quadratic on the features v_i v_j (i <= j), v_i, 1.

    Inputs and labels are standardized before solving and the coefficients
    are mapped back to the original coordinates. The ridge penalty acts on
    the standardized non-constant coefficients.

    Args:
        inputs: Points (n, dim), or a cluster whose inputs and labels are used.
        labels: Targets (n,) when `inputs` is an array.
        ridge: Non-negative penalty.

    Returns:
        The fitted model with its training mean squared error.

    Raises:
        RankDeficientError: If ridge is 0 and the design is rank deficient.
    """
    if isinstance(inputs, DemoCluster):
        labels = inputs.labels
        inputs = inputs.inputs
    points = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(labels, dtype=float)
    n, dim = points.shape
    n_features = n_quadratic_features(dim)
    if ridge < 0.0:
        raise ValueError(f'ridge must be >= 0, got {ridge}.')
    if targets.shape != (n,):
        raise ValueError(f'Expected {n} labels, got shape {targets.shape}.')
    if n < n_features:
        raise ValueError(f'Need at least {n_features} records, got {n}.')

    mean = points.mean(axis=0)
    spread = points.std(axis=0)
    spread[spread == 0.0] = 1.0
    label_mean = float(targets.mean())
    label_scale = float(targets.std()) or 1.0
    u = (points - mean) / spread
    y = (targets - label_mean) / label_scale

    pairs = _feature_pairs(dim)
    design = np.column_stack(
        [u[:, i] * u[:, j] for i, j in pairs] + [u[:, i] for i in range(dim)] + [np.ones(n)]
    )

    if ridge == 0.0:
        theta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < n_features:
            raise RankDeficientError(int(rank), n_features)
    else:
        penalty = ridge * np.eye(n_features)
        penalty[-1, -1] = 0.0
        theta = np.linalg.solve(design.T @ design + penalty, design.T @ y)

    # Back to the original coordinates: u = D (v - m)
    theta_quad = np.zeros((dim, dim))
    for (i, j), coefficient in zip(pairs, theta[:len(pairs)]):
        if i == j:
            theta_quad[i, i] = coefficient
        else:
            theta_quad[i, j] = theta_quad[j, i] = coefficient / 2
    theta_lin = theta[len(pairs):len(pairs) + dim]
    theta_const = theta[-1]

    scaling = np.diag(1.0 / spread)
    quad = scaling @ theta_quad @ scaling
    lin = -2 * quad @ mean + scaling @ theta_lin
    const = mean @ quad @ mean - theta_lin @ scaling @ mean + theta_const

    residual = design @ theta - y
    mse = float(np.mean(residual ** 2)) * label_scale ** 2
    return QuadraticModel(
        quad=label_scale * quad,
        lin=label_scale * lin,
        const=label_scale * const + label_mean,
        train_mse=mse
    )


def fit_dataset(dataset: DemoDataset, ridge: float = 0.0) -> tuple[QuadraticModel, ...]:
    """
    One quadratic per cluster, in stage order.
    """
    models = []
    for cluster in dataset.clusters:
        fitted = fit_quadratic(cluster, ridge=ridge)
        logging.info(
            f'Fitted {dataset.kind.value} model at stage {cluster.stage}: '
            f'MSE = {fitted.train_mse:.3e}'
        )
        models.append(fitted)
    return tuple(models)


def _transition_matrices(model: LqgModel) -> tuple[np.ndarray, np.ndarray]:
    return np.hstack([model.a_matrix, model.b_matrix]), model.drift


def _expected_quadratic(model: LqgModel, weight: np.ndarray, offset: float) \
-> QuadraticModel:
    # E[z'^T W z' | v] + offset with z' ~ N(C v + d, Sigma)
    c, d = _transition_matrices(model)
    return QuadraticModel(
        quad=c.T @ weight @ c,
        lin=2 * c.T @ weight @ d,
        const=d @ weight @ d + float(np.trace(weight @ model.noise_cov)) + offset
    )


def exact_evtg_model(sol: RiccatiSolution, model: LqgModel, stage: int) -> QuadraticModel:
    """
    W*_k as a quadratic in (z, mu), for k in 1..H.
    """
    check_stage(stage, 1, sol.horizon)
    return _expected_quadratic(model, sol.p_seq[stage], float(sol.c_seq[stage]))


def terminal_evtg_model(model: LqgModel) -> QuadraticModel:
    """
    W*_H(z, mu) = E[z'^T Q_f z' | z, mu].
    """
    return _expected_quadratic(model, model.q_final, 0.0)


def exact_evtg_models(sol: RiccatiSolution, model: LqgModel) -> tuple[QuadraticModel, ...]:
    """
    W*_1..W*_H, the models of the exact scheme.
    """
    return tuple(exact_evtg_model(sol, model, stage) for stage in range(1, sol.horizon + 1))


def _is_positive_definite(matrix: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def box_minimize(q: QuadraticModel, states: np.ndarray, state_dim: int = 4,
                 bound: float = DEFAULT_ACTION_BOUND) -> tuple[np.ndarray, np.ndarray]:
    """
    Global minimum over mu in [-bound, bound]^m of q(z, mu), one per row of
    `states`.

    Every face of the box is visited: the coordinates off the face sit at
    -bound or +bound, the free ones at the face's stationary point when
    their block is positive definite. Vertices are always candidates.

    Returns:
        The minimizing actions, shape (n, m), and the minimum values, shape (n,).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    _, m_zmu, m_mumu, _, l_mu = q.blocks(state_dim)
    action_dim = q.dim - state_dim
    slopes = 2 * states @ m_zmu + l_mu
    n = states.shape[0]

    best_values = np.full(n, np.inf)
    best_actions = np.zeros((n, action_dim))
    for pattern in product((-1, 0, 1), repeat=action_dim):
        pattern = np.array(pattern)
        free = pattern == 0
        actions = np.tile(pattern * bound, (n, 1)).astype(float)
        feasible = np.ones(n, dtype=bool)
        if free.any():
            block = m_mumu[np.ix_(free, free)]
            if not _is_positive_definite(block):
                continue
            rhs = slopes[:, free] / 2 + actions[:, ~free] @ m_mumu[np.ix_(~free, free)]
            actions[:, free] = -np.linalg.solve(block, rhs.T).T
            feasible = np.all(np.abs(actions[:, free]) <= bound, axis=1)
        values = np.where(feasible, q(np.hstack([states, actions])), np.inf)
        better = values < best_values
        best_values[better] = values[better]
        best_actions[better] = actions[better]
    return best_actions, best_values


def minimize_over_action(q: QuadraticModel, z: np.ndarray, state_dim: int = 4,
                         bound: float = DEFAULT_ACTION_BOUND) -> tuple[np.ndarray, bool]:
    """
    Minimizer over mu of a quadratic q(z, mu).

    Solves the stationarity system when the action block is positive
    definite; otherwise takes the global minimum over [-bound, bound]^m
    from `box_minimize()`.

    Returns:
        The action and whether the closed form was used.
    """
    z = np.asarray(z, dtype=float)
    _, m_zmu, m_mumu, _, l_mu = q.blocks(state_dim)
    if _is_positive_definite(m_mumu):
        action = -np.linalg.solve(m_mumu, m_zmu.T @ z + l_mu / 2)
        return action, True
    actions, _ = box_minimize(q, z, state_dim, bound)
    return actions[0], False


class QuadraticScheme(AdpScheme):
    """
    ADP scheme on an LQG model with quadratic W^_{k+1}.

    Attributes:
        model: The LQG model.
        models: W^_1..W^_H as quadratics in (z, mu).
        q_models: Q^_0..Q^_{H-1} as quadratics in (z, mu).
        definite: Whether the action block of each Q^_k is positive definite.
    """

    def __init__(self, problem: HorizonProblem, model: LqgModel,
                 models: Sequence[QuadraticModel]):
        if len(models) != model.horizon:
            raise ValueError(f'Expected {model.horizon} models, got {len(models)}.')
        self.model = model
        self.models = tuple(models)
        stage_weights = QuadraticModel(
            block_diag(model.q_state, model.r_control), np.zeros(6), 0.0)
        self.q_models = tuple(stage_weights + w for w in self.models)
        self.definite = tuple(
            _is_positive_definite(q.blocks(model.state_dim)[2]) for q in self.q_models)
        for stage, definite in enumerate(self.definite):
            if not definite:
                logging.warning(f'Q^_{stage} has a non-definite action block; '
                                f'using the bounded search fallback.')
        super().__init__(
            problem,
            lambda stage, z, mu: self.models[stage](np.concatenate([z, mu]))
        )

    @property
    def fallback_stages(self) -> tuple[int, ...]:
        return tuple(stage for stage, ok in enumerate(self.definite) if not ok)

    def at(self, z0: np.ndarray) -> 'QuadraticScheme':
        """
        The same scheme on the problem started from z0.
        """
        return QuadraticScheme(lqg_as_horizon_problem(self.model, z0), self.model, self.models)

    def q_hat(self, stage: int, state: np.ndarray, action: np.ndarray) -> float:
        check_stage(stage, 0, self.horizon - 1)
        return float(self.q_models[stage](np.concatenate([state, action])))

    def action(self, stage: int, state: np.ndarray) -> np.ndarray:
        check_stage(stage, 0, self.horizon - 1)
        action, _ = minimize_over_action(self.q_models[stage], state, self.model.state_dim)
        return action

    def affine_gains(self) -> tuple[np.ndarray, np.ndarray]:
        """
        The ADP policy as mu_k = -L_k z - l_k.

        Raises:
            NonDefiniteBlockError: If some action block is not positive definite.
        """
        gains = np.empty((self.horizon, self.model.action_dim, self.model.state_dim))
        offsets = np.empty((self.horizon, self.model.action_dim))
        for stage, q in enumerate(self.q_models):
            if not self.definite[stage]:
                raise NonDefiniteBlockError(stage)
            _, m_zmu, m_mumu, _, l_mu = q.blocks(self.model.state_dim)
            gains[stage] = np.linalg.solve(m_mumu, m_zmu.T)
            offsets[stage] = np.linalg.solve(m_mumu, l_mu / 2)
        return gains, offsets

    def perturbed(self, scale: float, seed: SeedLike,
                  keep_last: bool = True) -> 'QuadraticScheme':
        """
        The scheme with its W^ models perturbed by `QuadraticModel.perturbed()`.
        With `keep_last`, W^_H is left untouched.
        """
        rngs = [np.random.default_rng(s) for s in as_seed_sequence(seed).spawn(self.horizon)]
        models = [w.perturbed(scale, rng) for w, rng in zip(self.models, rngs)]
        if keep_last:
            models[-1] = self.models[-1]
        return QuadraticScheme(self.problem, self.model, models)


def build_scheme(models: Sequence[QuadraticModel], model: LqgModel,
                 pin_terminal: bool = False, z0: np.ndarray | None = None) \
-> QuadraticScheme:
    """
    Builds the ADP scheme acting on fitted W^ models.

    Args:
        models: W^_1..W^_H.
        model: The LQG model.
        pin_terminal: Replace W^_H by the exact terminal expectation.
        z0: Initial error state of the scheme's problem.
    """
    models = list(models)
    if len(models) != model.horizon:
        raise ValueError(f'Expected {model.horizon} models, got {len(models)}.')
    if pin_terminal:
        models[-1] = terminal_evtg_model(model)
    return QuadraticScheme(lqg_as_horizon_problem(model, z0), model, models)


def _error_boxes(dataset: DemoDataset, horizon: int, margin: float) -> tuple[SearchBox, ...]:
    if not dataset.clusters or dataset.n_records == 0:
        raise ValueError('Cannot build search boxes from an empty dataset.')
    return tuple(
        SearchBox.from_samples(dataset.cluster(stage - 1).inputs, margin, stage)
        for stage in range(1, horizon)
    )


def build_error_model(q0: QuadraticModel, deltas: Sequence[QuadraticModel],
                      trajectories: DemoDataset,
                      margin: float = DEFAULT_BOX_MARGIN) -> StepwiseErrorModel:
    """
    Packages learned delta_k surrogates with boxes from the demonstrations.

    The box of delta_k spans the recorded (z_{k-1}, mu_{k-1}) inflated by
    `margin`.
    """
    horizon = len(deltas) + 1
    boxes = _error_boxes(trajectories, horizon, margin)
    return StepwiseErrorModel(
        deltas=tuple(deltas),
        boxes=boxes,
        direction=Direction.MINIMIZE,
        q0=q0,
        metadata={'source': 'learned', 'margin': margin}
    )


@dataclass(frozen=True, eq=False)
class SampledBoxDelta:
    """
    delta_k for a Q^_k whose action block is not positive definite.

    The inner minimum runs over the action box (`box_minimize()`), the
    expectation over a fixed set of noise draws, so repeated evaluations
    see common random numbers.

    Attributes:
        q: Q^_k.
        w_prev: W^_k as a function of (z_{k-1}, mu_{k-1}).
        transition: C with z' = C v + d + w.
        drift: d.
        noise: Noise draws, shape (n_draws, state_dim).
        bound: Half width of the action box.
    """
    q: QuadraticModel
    w_prev: QuadraticModel
    transition: np.ndarray
    drift: np.ndarray
    noise: np.ndarray
    bound: float = DEFAULT_ACTION_BOUND

    def __call__(self, point: np.ndarray) -> float:
        point = np.asarray(point, dtype=float)
        following = self.transition @ point + self.drift + self.noise
        _, values = box_minimize(self.q, following, self.drift.size, self.bound)
        return float(values.mean()) - float(self.w_prev(point))


def scheme_error_model(scheme: QuadraticScheme, model: LqgModel, dataset: DemoDataset,
                       margin: float = DEFAULT_BOX_MARGIN,
                       n_draws: int = FALLBACK_DRAWS, seed: SeedLike = 0) \
-> StepwiseErrorModel:
    """
    delta_k derived in closed form from the scheme itself.

    min over mu of Q^_k(z, mu) is the quadratic z^T G z + g . z + g0; its
    expectation under z ~ N(C v + d, Sigma) minus W^_k(v) is again a
    quadratic in v = (z_{k-1}, mu_{k-1}). Stages whose action block is not
    positive definite get a `SampledBoxDelta` with `n_draws` noise draws
    instead; their epsilon search then runs without gradients.
    """
    split = model.state_dim
    c, d = _transition_matrices(model)
    rng = np.random.default_rng(as_seed_sequence(seed))
    deltas: list[Any] = []
    sampled = []
    for stage in range(1, model.horizon):
        if not scheme.definite[stage]:
            noise = rng.multivariate_normal(np.zeros(split), model.noise_cov,
                                            size=n_draws, method='eigh')
            deltas.append(SampledBoxDelta(scheme.q_models[stage], scheme.models[stage - 1],
                                          c, d, noise))
            sampled.append(stage)
            continue
        m_zz, m_zmu, m_mumu, l_z, l_mu = scheme.q_models[stage].blocks(split)
        solved = np.linalg.solve(m_mumu, np.column_stack([m_zmu.T, l_mu]))
        g = m_zz - m_zmu @ solved[:, :-1]
        g = (g + g.T) / 2
        g_lin = l_z - m_zmu @ solved[:, -1]
        g_const = scheme.q_models[stage].const - l_mu @ solved[:, -1] / 4

        expected = QuadraticModel(
            quad=c.T @ g @ c,
            lin=2 * c.T @ g @ d + c.T @ g_lin,
            const=d @ g @ d + g_lin @ d + float(np.trace(g @ model.noise_cov)) + g_const
        )
        deltas.append(expected - scheme.models[stage - 1])

    if sampled:
        logging.warning(f'Sampled stepwise errors at stages {sampled} '
                        f'({n_draws} draws, action box {DEFAULT_ACTION_BOUND:g}).')
    return StepwiseErrorModel(
        deltas=tuple(deltas),
        boxes=_error_boxes(dataset, model.horizon, margin),
        direction=Direction.MINIMIZE,
        q0=scheme.q_models[0],
        metadata={'source': 'scheme', 'margin': margin, 'sampled_stages': tuple(sampled)}
    )


def write_quadratic(model: QuadraticModel, path: str | Path) -> None:
    """
    Writes the coefficients as plain text: a `dim` line, the quad rows, the
    lin row, the const line and the train_mse line.
    """
    lines = [f'dim {model.dim}']
    lines += [' '.join(repr(float(v)) for v in row) for row in model.quad]
    lines.append(' '.join(repr(float(v)) for v in model.lin))
    lines.append(f'const {model.const!r}')
    lines.append(f'train_mse {model.train_mse!r}')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def read_quadratic(path: str | Path) -> QuadraticModel:
    rows = [line.split() for line in
            Path(path).read_text(encoding='utf-8').splitlines() if line.strip()]
    try:
        dim = int(rows[0][1])
        quad = np.array(rows[1:1 + dim], dtype=float)
        lin = np.array(rows[1 + dim], dtype=float)
        const = float(rows[2 + dim][1])
        mse = float(rows[3 + dim][1])
    except (IndexError, ValueError) as error:
        raise ValueError(f'{path}: malformed quadratic model file.') from error
    return QuadraticModel(quad, lin, const, mse)


DATASET_COLUMNS = ['stage', 'z1', 'z2', 'z3', 'z4', 'mu1', 'mu2', 'label', 'label_kind']


def dataset_frame(dataset: DemoDataset) -> pd.DataFrame:
    frames = []
    for cluster in dataset.clusters:
        frame = pd.DataFrame(cluster.inputs, columns=DATASET_COLUMNS[1:7])
        frame.insert(0, 'stage', cluster.stage)
        frame['label'] = cluster.labels
        frame['label_kind'] = dataset.kind.value
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)[DATASET_COLUMNS]


def write_dataset(dataset: DemoDataset, path: str | Path) -> None:
    dataset_frame(dataset).to_csv(path, index=False, lineterminator='\n',
                                  float_format='%.17g')
    logging.info(f'Wrote {dataset.kind.value} dataset to {path}.')


def read_dataset(path: str | Path) -> DemoDataset:
    """
    Reads a dataset written by `write_dataset()`; provenance is not stored.
    """
    frame = pd.read_csv(path)
    missing = set(DATASET_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f'{path}: missing columns {sorted(missing)}.')
    kinds = frame['label_kind'].unique()
    if len(kinds) != 1:
        raise ValueError(f'{path}: expected one label kind, found {list(kinds)}.')

    clusters = []
    for stage, group in frame.groupby('stage', sort=True):
        clusters.append(DemoCluster(
            stage=int(stage),
            states=group[['z1', 'z2', 'z3', 'z4']].to_numpy(dtype=float),
            actions=group[['mu1', 'mu2']].to_numpy(dtype=float),
            labels=group['label'].to_numpy(dtype=float)
        ))
    return DemoDataset(LabelKind(kinds[0]), tuple(clusters), {'source': str(path)})
