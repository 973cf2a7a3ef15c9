import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from model.horizon_model import SeedLike, as_seed_sequence
from model.submod_model import (
    Prefix, SubmodMode, SubmodObjective, bound_classic, bound_greedy_curvature,
    bound_top_h, brute_force_opt, greedy, top_h_value
)


DEFAULT_TIME_STEP = 0.1
HIGH_DENSITY = (0.5, 0.8)
LOW_DENSITY = (0.1, 0.3)

SWEEP_COLUMNS = ['mode', 'lambda0', 'zeta', 'H', 'f_greedy', 'v_bar',
                 'beta0', 'beta1', 'beta2', 'f_opt']


class ScenarioFormatError(ValueError):
    """
    Raised when a scenario grid file cannot be parsed.
    """


@dataclass(frozen=True, eq=False)
class MissionScenario:
    """
    Lattice mission space with event densities and a decaying sensor model.

    Lattice point (x, y) has index y * width + x. The sensor placed at step
    k detects an event at distance r with probability exp(-lambda_k r),
    lambda_k = lambda0 + zeta * t_k and t_k = time_step * k.

    Attributes:
        width: Lattice points per row.
        height: Number of rows.
        density: Event density R per point, shape (height, width).
        horizon: Number of sensors H.
        lambda0: Initial decay rate.
        zeta: Growth of the decay rate over the steps.
        feasible_points: Indices of the placement candidates; all points when None.
        time_step: Spacing of t_k.
    """
    width: int
    height: int
    density: np.ndarray
    horizon: int
    lambda0: float
    zeta: float
    feasible_points: tuple[int, ...] | None = None
    time_step: float = DEFAULT_TIME_STEP

    def __post_init__(self):
        density = np.array(self.density, dtype=float)
        if self.width < 1 or self.height < 1:
            raise ValueError(f'Lattice must be at least 1x1, got {self.width}x{self.height}.')
        if density.shape != (self.height, self.width):
            raise ValueError(
                f'Density must have shape {(self.height, self.width)}, got {density.shape}.')
        if not np.all(np.isfinite(density)) or np.any(density < 0.0):
            raise ValueError('Densities must be finite and non-negative.')
        if self.horizon < 1:
            raise ValueError(f'Horizon must be >= 1, got {self.horizon}.')
        if np.any(self.lambdas <= 0.0):
            raise ValueError(f'Decay rates must be positive, got {self.lambdas.tolist()}.')
        density.setflags(write=False)
        object.__setattr__(self, 'density', density)

        if self.feasible_points is not None:
            points = tuple(int(p) for p in self.feasible_points)
            if not points:
                raise ValueError('Feasible set must not be empty.')
            if min(points) < 0 or max(points) >= self.n_points:
                raise ValueError('Feasible point index outside the lattice.')
            if len(set(points)) != len(points):
                raise ValueError('Feasible points must be distinct.')
            object.__setattr__(self, 'feasible_points', points)

    @property
    def n_points(self) -> int:
        return self.width * self.height

    @property
    def lambdas(self) -> np.ndarray:
        return self.lambda0 + self.zeta * self.time_step * np.arange(self.horizon)

    @property
    def mode(self) -> SubmodMode:
        """
        SET for a constant decay rate, STRING otherwise.
        """
        return SubmodMode.SET if self.zeta == 0.0 else SubmodMode.STRING

    @property
    def candidates(self) -> tuple[int, ...]:
        if self.feasible_points is None:
            return tuple(range(self.n_points))
        return self.feasible_points

    @cached_property
    def coordinates(self) -> np.ndarray:
        """
        (x, y) of every lattice point in index order, shape (N, 2).
        """
        ys, xs = np.divmod(np.arange(self.n_points), self.width)
        return np.column_stack([xs, ys]).astype(float)

    def point(self, index: int) -> tuple[float, float]:
        x, y = self.coordinates[index]
        return float(x), float(y)


def lattice_distances(scenario: MissionScenario) -> np.ndarray:
    """
    Distances from every placement candidate to every lattice point,
    shape (n_candidates, N).
    """
    coordinates = scenario.coordinates
    placed = coordinates[list(scenario.candidates)]
    return np.linalg.norm(placed[:, None, :] - coordinates[None, :, :], axis=-1)


def detection_prob(scenario: MissionScenario, x: Sequence[float],
                   placements: Sequence[tuple[Sequence[float], int]]) -> float:
    """
    P(x, S) = 1 - prod_k (1 - exp(-lambda_k |x - s_k|)).

    Args:
        scenario: Provides the decay schedule.
        x: Event location.
        placements: (sensor location, step) pairs with distinct steps.
    """
    if len(placements) > scenario.horizon:
        raise ValueError(f'At most {scenario.horizon} sensors, got {len(placements)}.')
    stages = [stage for _, stage in placements]
    if len(set(stages)) != len(stages) or any(not 0 <= s < scenario.horizon for s in stages):
        raise ValueError(f'Steps must be distinct and in [0, {scenario.horizon - 1}].')

    lambdas = scenario.lambdas
    missed = 1.0
    for location, stage in placements:
        distance = math.dist(x, location)
        missed *= 1.0 - math.exp(-lambdas[stage] * distance)
    return 1.0 - missed


def coverage_objective(scenario: MissionScenario, distances: np.ndarray | None = None) \
-> SubmodObjective:
    """
    f(S) = sum over lattice points of R(x) P(x, S).

    Sequences index `scenario.candidates`. The decay rate of a sensor is the
    one of its position in the sequence.

    Args:
        scenario: The mission.
        distances: Precomputed `lattice_distances(scenario)`.
    """
    if distances is None:
        distances = lattice_distances(scenario)
    if distances.shape != (len(scenario.candidates), scenario.n_points):
        raise ValueError('Distances do not match the scenario.')
    weights = scenario.density.ravel()
    lambdas = scenario.lambdas

    def missed(prefix: Prefix) -> np.ndarray:
        result = np.ones(scenario.n_points)
        for stage, element in enumerate(prefix):
            result = result * (1.0 - np.exp(-lambdas[stage] * distances[element]))
        return result

    def batch_evaluate(prefix: Prefix, candidates: Sequence[int]) -> np.ndarray:
        if len(prefix) >= scenario.horizon:
            raise ValueError(f'Cannot place more than {scenario.horizon} sensors.')
        stage = len(prefix)
        extended = missed(prefix) * (1.0 - np.exp(-lambdas[stage] * distances[list(candidates)]))
        return ((1.0 - extended) * weights).sum(axis=-1)

    def evaluate(sequence: Prefix) -> float:
        if not sequence:
            return 0.0
        return float(batch_evaluate(sequence[:-1], [sequence[-1]])[0])

    return SubmodObjective(
        mode=scenario.mode,
        ground_set=scenario.candidates,
        evaluate=evaluate,
        horizon=scenario.horizon,
        batch_evaluate=batch_evaluate
    )


def _quadrant_density(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    # High density in the top-right and bottom-left quadrants
    ys, xs = np.mgrid[0:height, 0:width]
    right = xs >= width / 2
    top = ys >= height / 2
    high = right == top
    return np.where(high, rng.uniform(*HIGH_DENSITY, size=(height, width)),
                    rng.uniform(*LOW_DENSITY, size=(height, width)))


def build_paper_scenario(seed: SeedLike, lambda0: float = 0.5, zeta: float = 0.1,
                         horizon: int = 5, stride: int = 1) -> MissionScenario:
    """
    The 50 x 40 mission with quadrant densities.

    Args:
        seed: Seed of the density draws.
        lambda0: Initial decay rate.
        zeta: Decay-rate growth.
        horizon: Number of sensors.
        stride: Keep every stride-th lattice point per axis as candidate.
    """
    if stride < 1:
        raise ValueError(f'stride must be >= 1, got {stride}.')
    width, height = 50, 40
    rng = np.random.default_rng(as_seed_sequence(seed))
    density = _quadrant_density(width, height, rng)
    feasible = None
    if stride > 1:
        feasible = tuple(y * width + x for y in range(0, height, stride)
                         for x in range(0, width, stride))
    return MissionScenario(width, height, density, horizon, lambda0, zeta, feasible)


def build_reduced_scenario(seed: SeedLike, width: int = 10, height: int = 8,
                           n_feasible: int = 12, horizon: int = 3,
                           lambda0: float = 0.5, zeta: float = 0.1) -> MissionScenario:
    """
    A small mission with a random candidate set, for brute-force checks.
    """
    rng = np.random.default_rng(as_seed_sequence(seed))
    density = _quadrant_density(width, height, rng)
    feasible = np.sort(rng.choice(width * height, size=n_feasible, replace=False))
    return MissionScenario(width, height, density, horizon, lambda0, zeta,
                           tuple(int(p) for p in feasible))


def sweep_bounds(scenario_template: MissionScenario, lambda0_grid: Sequence[float],
                 mode: SubmodMode, with_opt: bool = False,
                 distances: np.ndarray | None = None) -> pd.DataFrame:
    """
    Greedy placement and its three ratio bounds for each initial decay rate.

    SET mode uses zeta = 0, STRING mode the template's zeta.

    Args:
        scenario_template: Lattice, densities, candidates and H.
        lambda0_grid: Initial decay rates.
        mode: Which panel to compute.
        with_opt: Also enumerate the optimum.
        distances: Precomputed lattice distances of the template.

    Returns:
        One row per grid point with the SWEEP_COLUMNS.
    """
    if len(lambda0_grid) == 0:
        raise ValueError('The lambda0 grid must not be empty.')
    zeta = 0.0 if mode is SubmodMode.SET else scenario_template.zeta
    if mode is SubmodMode.STRING and zeta == 0.0:
        raise ValueError('String mode needs a template with zeta > 0.')
    if distances is None:
        distances = lattice_distances(scenario_template)

    rows = []
    for lambda0 in lambda0_grid:
        scenario = replace(scenario_template, lambda0=float(lambda0), zeta=zeta)
        objective = coverage_objective(scenario, distances)
        run = greedy(objective)
        f_opt = brute_force_opt(objective)[1] if with_opt else math.nan
        rows.append({
            'mode': mode.value,
            'lambda0': float(lambda0),
            'zeta': zeta,
            'H': scenario.horizon,
            'f_greedy': run.value,
            'v_bar': top_h_value(run, objective),
            'beta0': bound_classic(),
            'beta1': bound_greedy_curvature(run, objective),
            'beta2': bound_top_h(run, objective),
            'f_opt': f_opt,
        })
        logging.debug(f'Sweep {mode.value} lambda0={lambda0:g}: {rows[-1]}')

    logging.info(f'Swept {len(rows)} decay rates in {mode.value} mode.')
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def write_scenario(scenario: MissionScenario, path: str | Path) -> None:
    """
    Writes the grid file: a `width height H lambda0 zeta` header, one density
    row per lattice row (y = 0 first) and an optional `feasible` line.
    """
    lines = [f'{scenario.width} {scenario.height} {scenario.horizon} '
             f'{scenario.lambda0!r} {scenario.zeta!r}']
    lines += [' '.join(repr(float(v)) for v in row) for row in scenario.density]
    if scenario.feasible_points is not None:
        lines.append('feasible ' + ' '.join(str(p) for p in scenario.feasible_points))
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def read_scenario(path: str | Path) -> MissionScenario:
    rows = [line.split() for line in
            Path(path).read_text(encoding='utf-8').splitlines() if line.strip()]
    try:
        width, height, horizon = (int(v) for v in rows[0][:3])
        lambda0, zeta = float(rows[0][3]), float(rows[0][4])
        density = np.array(rows[1:1 + height], dtype=float)
    except (IndexError, ValueError) as error:
        raise ScenarioFormatError(f'{path}: malformed scenario header or density rows.') \
            from error

    feasible = None
    extra = rows[1 + height:]
    if extra:
        if extra[0][0] != 'feasible' or len(extra) > 1:
            raise ScenarioFormatError(f'{path}: unexpected content after the density rows.')
        feasible = tuple(int(p) for p in extra[0][1:])
    return MissionScenario(width, height, density, horizon, lambda0, zeta, feasible)
