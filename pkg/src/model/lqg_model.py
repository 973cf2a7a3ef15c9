import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from model.bound_model import check_stage
from model.horizon_model import (
    Direction, EuclideanActions, HorizonProblem, Policy
)


CONDITION_LIMIT = 1e12


class SingularGainError(ValueError):
    """
    Raised when S_{k+1} = R + B^T P_{k+1} B is numerically singular.
    """
    def __init__(self, stage: int, condition: float):
        super().__init__(
            f'S_{stage + 1} is numerically singular at stage {stage} '
            f'(condition number {condition:.3e}).'
        )
        self.stage = stage
        self.condition = condition


def _diagonal(values: Sequence[float], size: int, name: str, strict: bool = False) \
-> tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if len(values) != size:
        raise ValueError(f'{name} needs {size} entries, got {len(values)}.')
    if not all(np.isfinite(values)):
        raise ValueError(f'{name} entries must be finite.')
    if strict and any(v <= 0.0 for v in values):
        raise ValueError(f'{name} entries must be positive.')
    if any(v < 0.0 for v in values):
        raise ValueError(f'{name} entries must be non-negative.')
    return values


def _vector(values: Sequence[float], size: int, name: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if len(values) != size or not all(np.isfinite(values)):
        raise ValueError(f'{name} needs {size} finite entries, got {values}.')
    return values


@dataclass(frozen=True)
class LqgModel:
    """
    Discretized double integrator with quadratic costs and Gaussian noise.

    The state is (x, x velocity, y, y velocity); the control is the force
    per axis. All weights are diagonal. Costs are defined on the error
    z = x - x_target.

    Attributes:
        mass: Robot mass m.
        step: Sampling period T.
        horizon: Number of stages H.
        x_initial: Nominal initial state x_0.
        x_target: Target state x_f.
        q_diag: Diagonal of the stage weight Q.
        r_diag: Diagonal of the control weight R.
        qf_diag: Diagonal of the terminal weight Q_f.
        sigma_diag: Diagonal of the noise covariance.
    """
    mass: float
    step: float
    horizon: int
    x_initial: tuple[float, ...]
    x_target: tuple[float, ...]
    q_diag: tuple[float, ...]
    r_diag: tuple[float, ...]
    qf_diag: tuple[float, ...]
    sigma_diag: tuple[float, ...]

    def __post_init__(self):
        if not self.mass > 0.0:
            raise ValueError(f'mass must be positive, got {self.mass}.')
        if not self.step > 0.0:
            raise ValueError(f'step must be positive, got {self.step}.')
        if self.horizon < 1:
            raise ValueError(f'horizon must be >= 1, got {self.horizon}.')
        object.__setattr__(self, 'x_initial', _vector(self.x_initial, 4, 'x_initial'))
        object.__setattr__(self, 'x_target', _vector(self.x_target, 4, 'x_target'))
        object.__setattr__(self, 'q_diag', _diagonal(self.q_diag, 4, 'q_diag'))
        object.__setattr__(self, 'r_diag', _diagonal(self.r_diag, 2, 'r_diag', strict=True))
        object.__setattr__(self, 'qf_diag', _diagonal(self.qf_diag, 4, 'qf_diag'))
        object.__setattr__(self, 'sigma_diag', _diagonal(self.sigma_diag, 4, 'sigma_diag'))

    @classmethod
    def path_planning(cls) -> 'LqgModel':
        """
        The reference path-planning experiment.
        """
        return cls(
            mass=1.0,
            step=0.1,
            horizon=10,
            x_initial=(0.0, 0.0, 0.0, 0.0),
            x_target=(100.0, 0.0, 100.0, 0.0),
            q_diag=(10.0, 1.0, 10.0, 1.0),
            r_diag=(0.5, 0.5),
            qf_diag=(500.0, 1000.0, 500.0, 1000.0),
            sigma_diag=(5.0, 2.0, 5.0, 2.0)
        )

    @cached_property
    def a_matrix(self) -> np.ndarray:
        t = self.step
        return np.array([
            [1.0, t, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, t],
            [0.0, 0.0, 0.0, 1.0],
        ])

    @cached_property
    def b_matrix(self) -> np.ndarray:
        t, m = self.step, self.mass
        return np.array([
            [t * t / (2 * m), 0.0],
            [t / m, 0.0],
            [0.0, t * t / (2 * m)],
            [0.0, t / m],
        ])

    @cached_property
    def q_state(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @cached_property
    def r_control(self) -> np.ndarray:
        return np.diag(self.r_diag)

    @cached_property
    def q_final(self) -> np.ndarray:
        return np.diag(self.qf_diag)

    @cached_property
    def noise_cov(self) -> np.ndarray:
        return np.diag(self.sigma_diag)

    @cached_property
    def drift(self) -> np.ndarray:
        """
        d = A x_f - x_f; zero whenever the target velocities are zero.
        """
        target = np.asarray(self.x_target)
        return self.a_matrix @ target - target

    @property
    def initial_error(self) -> np.ndarray:
        """
        z_0 = x_0 - x_f.
        """
        return np.asarray(self.x_initial) - np.asarray(self.x_target)

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 2


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """
    Solution of the backward Riccati recursion.

    Attributes:
        p_seq: P_0..P_H, shape (H+1, n, n).
        k_seq: K_0..K_{H-1}, shape (H, m, n).
        c_seq: c_0..c_H, shape (H+1,).
        s_seq: S_1..S_H, shape (H, m, m); s_seq[k] is S_{k+1}.
    """
    p_seq: np.ndarray
    k_seq: np.ndarray
    c_seq: np.ndarray
    s_seq: np.ndarray

    @property
    def horizon(self) -> int:
        return self.k_seq.shape[0]

    def gain(self, stage: int) -> np.ndarray:
        check_stage(stage, 0, self.horizon - 1)
        return self.k_seq[stage]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def riccati_recursion(a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray,
                      qf: np.ndarray, sigma: np.ndarray, horizon: int) \
-> RiccatiSolution:
    """
    Backward Riccati recursion for z' = A z + B mu + w, w ~ N(0, sigma).

    Starting from P_H = Q_f and c_H = 0:
        S_{k+1} = R + B^T P_{k+1} B
        K_k     = S_{k+1}^{-1} B^T P_{k+1} A
        P_k     = Q + A^T P_{k+1} A - A^T P_{k+1} B K_k   (symmetrized)
        c_k     = c_{k+1} + Tr(sigma P_{k+1})

    Raises:
        SingularGainError: If some S_{k+1} is numerically singular.
    """
    a, b, q, r, qf, sigma = (np.atleast_2d(np.asarray(m, dtype=float))
                             for m in (a, b, q, r, qf, sigma))
    n, m = b.shape
    if horizon < 1:
        raise ValueError(f'horizon must be >= 1, got {horizon}.')

    p_seq = np.zeros((horizon + 1, n, n))
    k_seq = np.zeros((horizon, m, n))
    s_seq = np.zeros((horizon, m, m))
    c_seq = np.zeros(horizon + 1)
    p_seq[horizon] = qf

    for stage in range(horizon - 1, -1, -1):
        p_next = p_seq[stage + 1]
        s = r + b.T @ p_next @ b
        condition = float(np.linalg.cond(s))
        if not np.isfinite(condition) or condition > CONDITION_LIMIT:
            raise SingularGainError(stage, condition)
        gain = np.linalg.solve(s, b.T @ p_next @ a)
        p = q + a.T @ p_next @ a - a.T @ p_next @ b @ gain
        p_seq[stage] = (p + p.T) / 2
        k_seq[stage] = gain
        s_seq[stage] = s
        c_seq[stage] = c_seq[stage + 1] + np.trace(sigma @ p_next)
        logging.debug(f'Riccati stage {stage}: cond(S) = {condition:.3e}')

    return RiccatiSolution(
        p_seq=_frozen(p_seq),
        k_seq=_frozen(k_seq),
        c_seq=_frozen(c_seq),
        s_seq=_frozen(s_seq)
    )


def riccati_solve(model: LqgModel) -> RiccatiSolution:
    """
    Solves the Riccati recursion of an LQG model.

    Raises:
        ValueError: If the model has a nonzero drift d = A x_f - x_f.
        SingularGainError: If some S_{k+1} is numerically singular.
    """
    if np.any(np.abs(model.drift) > 1e-12):
        raise ValueError(
            f'Riccati solution needs zero drift; target {model.x_target} gives '
            f'd = {model.drift.tolist()}.'
        )
    solution = riccati_recursion(
        model.a_matrix, model.b_matrix, model.q_state, model.r_control,
        model.q_final, model.noise_cov, model.horizon
    )
    logging.info(
        f'Riccati recursion solved for H={model.horizon}: c_0 = {solution.c_seq[0]:.6g}'
    )
    return solution


def _quad_form(matrix: np.ndarray, vectors: np.ndarray) -> np.ndarray | float:
    vectors = np.asarray(vectors, dtype=float)
    value = np.einsum('...i,ij,...j->...', vectors, matrix, vectors)
    return float(value) if value.ndim == 0 else value


def value_to_go(sol: RiccatiSolution, noise_cov: np.ndarray, stage: int,
                z: np.ndarray) -> np.ndarray | float:
    """
    V*_k(z) = z^T P_k z + sum_{i=k+1..H} Tr(noise_cov P_i).

    `z` may carry leading batch dimensions.
    """
    check_stage(stage, 0, sol.horizon)
    offset = sum(float(np.trace(noise_cov @ p)) for p in sol.p_seq[stage + 1:])
    return _quad_form(sol.p_seq[stage], z) + offset


def next_state_mean(model: LqgModel, z: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """
    E[z' | z, mu] = A z + B mu + d.
    """
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return z @ model.a_matrix.T + mu @ model.b_matrix.T + model.drift


def evtg_exact(sol: RiccatiSolution, model: LqgModel, stage: int,
               z_prev: np.ndarray, mu_prev: np.ndarray) -> np.ndarray | float:
    """
    W*_k(z, mu) = m^T P_k m + Tr(P_k Sigma) + sum_{i>k} Tr(Sigma P_i),
    with m = A z + B mu + d.
    """
    check_stage(stage, 1, sol.horizon)
    mean = next_state_mean(model, z_prev, mu_prev)
    noise = float(np.trace(sol.p_seq[stage] @ model.noise_cov))
    return value_to_go(sol, model.noise_cov, stage, mean) + noise


def stage_cost(model: LqgModel, z: np.ndarray, mu: np.ndarray) -> np.ndarray | float:
    return _quad_form(model.q_state, z) + _quad_form(model.r_control, mu)


def q_exact(sol: RiccatiSolution, model: LqgModel, stage: int,
            z: np.ndarray, mu: np.ndarray) -> np.ndarray | float:
    """
    Q*_k(z, mu) = z^T Q z + mu^T R mu + W*_{k+1}(z, mu).
    """
    check_stage(stage, 0, sol.horizon - 1)
    return stage_cost(model, z, mu) + evtg_exact(sol, model, stage + 1, z, mu)


def riccati_policy(sol: RiccatiSolution) -> Policy:
    """
    The optimal rule mu_k = -K_k z.
    """
    return lambda stage, z: -sol.k_seq[stage] @ np.asarray(z, dtype=float)


def lqg_as_horizon_problem(model: LqgModel, z0: np.ndarray | None = None) \
-> HorizonProblem:
    """
    The LQG model as a cost-minimization problem on the error state.

    Args:
        model: The LQG model.
        z0: Initial error state; defaults to x_0 - x_f.
    """
    a, b, d = model.a_matrix, model.b_matrix, model.drift
    scale = np.sqrt(np.asarray(model.sigma_diag))
    actions = EuclideanActions(model.action_dim)
    initial = model.initial_error if z0 is None else np.asarray(z0, dtype=float)

    return HorizonProblem(
        horizon=model.horizon,
        direction=Direction.MINIMIZE,
        initial_state=initial,
        transition=lambda stage, z, mu, w: a @ z + b @ np.asarray(mu, dtype=float) + d + w,
        noise_sampler=lambda stage, rng: rng.standard_normal(4) * scale,
        stage_reward=lambda stage, z, mu: stage_cost(model, z, mu),
        terminal_reward=lambda z: _quad_form(model.q_final, z),
        feasible_actions=lambda stage, z: actions
    )


def _affine_arrays(model: LqgModel, gains: np.ndarray, offsets: np.ndarray | None) \
-> tuple[np.ndarray, np.ndarray]:
    gains = np.asarray(gains, dtype=float)
    if gains.shape != (model.horizon, model.action_dim, model.state_dim):
        raise ValueError(f'Gains must have shape {(model.horizon, 2, 4)}, got {gains.shape}.')
    if offsets is None:
        offsets = np.zeros((model.horizon, model.action_dim))
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (model.horizon, model.action_dim):
        raise ValueError(f'Offsets must have shape {(model.horizon, 2)}, got {offsets.shape}.')
    return gains, offsets


def affine_policy_cost(model: LqgModel, gains: np.ndarray, offsets: np.ndarray | None,
                       z0: np.ndarray, z0_cov: np.ndarray | None = None) -> float:
    """
    Exact expected cost of the affine policy mu_k = -L_k z - l_k.

    Propagates the mean and covariance of the error state; every expected
    quadratic is m^T M m + Tr(M C).

    Args:
        model: The LQG model.
        gains: L_0..L_{H-1}, shape (H, 2, 4).
        offsets: l_0..l_{H-1}, shape (H, 2), or None for zeros.
        z0: Mean of the initial error state.
        z0_cov: Covariance of the initial error state (zero by default).
    """
    gains, offsets = _affine_arrays(model, gains, offsets)
    a, b, d = model.a_matrix, model.b_matrix, model.drift
    q, r = model.q_state, model.r_control
    mean = np.asarray(z0, dtype=float)
    cov = np.zeros((4, 4)) if z0_cov is None else np.asarray(z0_cov, dtype=float)

    cost = 0.0
    for stage in range(model.horizon):
        gain, offset = gains[stage], offsets[stage]
        mu_mean = -gain @ mean - offset
        cost += mean @ q @ mean + np.trace(q @ cov)
        cost += mu_mean @ r @ mu_mean + np.trace(r @ gain @ cov @ gain.T)
        closed = a - b @ gain
        mean = closed @ mean - b @ offset + d
        cov = closed @ cov @ closed.T + model.noise_cov

    cost += mean @ model.q_final @ mean + np.trace(model.q_final @ cov)
    return float(cost)


@dataclass(frozen=True, eq=False)
class AffineRollouts:
    """
    Batch of simulated paths under an affine policy.

    Attributes:
        costs: Total cost per path, shape (n,).
        states: Error states, shape (n, H+1, 4).
        actions: Controls, shape (n, H, 2).
    """
    costs: np.ndarray
    states: np.ndarray
    actions: np.ndarray


def simulate_affine_policy(model: LqgModel, gains: np.ndarray,
                           offsets: np.ndarray | None, z0s: np.ndarray,
                           rng: np.random.Generator) -> AffineRollouts:
    """
    Vectorized rollouts of mu_k = -L_k z - l_k from a batch of initial states.

    Args:
        model: The LQG model.
        gains: L_0..L_{H-1}, shape (H, 2, 4).
        offsets: l_0..l_{H-1}, shape (H, 2), or None for zeros.
        z0s: Initial error states, shape (n, 4).
        rng: Randomness source of the process noise.
    """
    gains, offsets = _affine_arrays(model, gains, offsets)
    z = np.atleast_2d(np.asarray(z0s, dtype=float))
    count = z.shape[0]
    scale = np.sqrt(np.asarray(model.sigma_diag))
    a, b, d = model.a_matrix, model.b_matrix, model.drift

    states = np.empty((count, model.horizon + 1, 4))
    actions = np.empty((count, model.horizon, 2))
    costs = np.zeros(count)
    states[:, 0] = z

    for stage in range(model.horizon):
        mu = -z @ gains[stage].T - offsets[stage]
        costs += stage_cost(model, z, mu)
        noise = rng.standard_normal((count, 4)) * scale
        z = z @ a.T + mu @ b.T + d + noise
        actions[:, stage] = mu
        states[:, stage + 1] = z

    costs += _quad_form(model.q_final, z)
    return AffineRollouts(costs=costs, states=states, actions=actions)
