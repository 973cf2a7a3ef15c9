import logging

import numpy as np
import pandas as pd

from model.config_model import ExperimentConfig, ExperimentKind, OracleSection  # type: ignore
from model.horizon_model import (  # type: ignore
    DiscreteMdp, Direction, ExactSolution, ValueEstimate, evaluate_policy_exact,
    random_mdp, solve_exact, spawn_seeds
)
from model.bound_model import TabularScheme, assemble_bound, epsilons_discrete  # type: ignore
from model.submod_model import BudgetExceededError, DEFAULT_BRUTE_FORCE_BUDGET  # type: ignore
from controller.main_controller import ExperimentResult, pipeline_stage  # type: ignore


ORACLE_COLUMNS = ['instance', 'n_states', 'n_actions', 'H', 'direction', 'scheme',
                  'v_star', 'v_hat', 'q_hat_0', 'eps_sum', 'bound', 'slack', 'valid']


class OracleController:
    """
    Validates the bound on random tabular problems against backward induction.

    Every odd instance is mirrored into a minimization problem. Each instance
    is scored with the exact scheme, the greedy scheme and one noisy-Q*
    scheme per configured noise scale.

    Attributes:
        config: The experiment configuration.
        section: Its oracle section.
    """
    config: ExperimentConfig
    section: OracleSection


    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.section = config.oracle

    def check_budget(self) -> None:
        """
        Raises:
            BudgetExceededError: If the largest instance has more kernel
                entries than the enumeration budget allows.
        """
        s = self.section
        count = s.max_horizon * s.max_states * s.max_actions * s.max_states
        if count > DEFAULT_BRUTE_FORCE_BUDGET:
            raise BudgetExceededError(count, DEFAULT_BRUTE_FORCE_BUDGET)

    def instance(self, index: int, seed: np.random.SeedSequence) -> DiscreteMdp:
        """
        Draws the sizes and tables of one instance.
        """
        size_seed, table_seed = seed.spawn(2)
        rng = np.random.default_rng(size_seed)
        n_states = int(rng.integers(1, self.section.max_states + 1))
        n_actions = int(rng.integers(1, self.section.max_actions + 1))
        horizon = int(rng.integers(2, self.section.max_horizon + 1))
        mdp = random_mdp(n_states, n_actions, horizon, table_seed)
        return mdp.mirrored() if index % 2 else mdp

    def schemes(self, mdp: DiscreteMdp, solution: ExactSolution,
                seed: np.random.SeedSequence) -> list[TabularScheme]:
        noise_seeds = seed.spawn(len(self.section.noise_scales))
        schemes = [TabularScheme.exact(mdp, solution), TabularScheme.greedy(mdp)]
        schemes += [
            TabularScheme.noisy(mdp, solution, scale, noise_seed)
            for scale, noise_seed in zip(self.section.noise_scales, noise_seeds)
        ]
        return schemes

    def score(self, index: int, mdp: DiscreteMdp, solution: ExactSolution,
              scheme: TabularScheme) -> dict:
        """
        Bound of one scheme on one instance as a table row.
        """
        epsilons = epsilons_discrete(mdp, scheme)
        v_hat = evaluate_policy_exact(mdp, scheme.policy_table())
        report = assemble_bound(
            mdp.as_horizon_problem(), scheme, epsilons, n_rollouts=2, seed=0,
            value=ValueEstimate(v_hat, 0.0, 0)
        )
        v_star = solution.v_star_total
        slack = mdp.direction.sign * (report.bound - v_star)
        return {
            'instance': index,
            'n_states': mdp.n_states,
            'n_actions': mdp.n_actions,
            'H': mdp.horizon,
            'direction': mdp.direction.name.lower(),
            'scheme': scheme.name,
            'v_star': v_star,
            'v_hat': v_hat,
            'q_hat_0': report.q_hat_0,
            'eps_sum': float(sum(epsilons)),
            'bound': report.bound,
            'slack': slack,
            'valid': bool(slack >= -self.section.tolerance),
        }

    def run(self) -> ExperimentResult:
        with pipeline_stage('budget'):
            self.check_budget()

        rows = []
        for index, seed in enumerate(spawn_seeds(self.config.seed, self.section.n_instances)):
            instance_seed, scheme_seed = seed.spawn(2)
            with pipeline_stage(f'instance {index}'):
                mdp = self.instance(index, instance_seed)
                solution = solve_exact(mdp)
                for scheme in self.schemes(mdp, solution, scheme_seed):
                    rows.append(self.score(index, mdp, solution, scheme))

        table = pd.DataFrame(rows, columns=ORACLE_COLUMNS)
        logging.info(f'Scored {len(table)} (instance, scheme) pairs')

        result = ExperimentResult(ExperimentKind.ORACLE_VALIDATE, tables={'oracle': table})
        tol = self.section.tolerance
        result.check(
            'bound_validity',
            bool(table['valid'].all()),
            f'{int(table["valid"].sum())}/{len(table)} valid'
        )
        exact = table[table['scheme'] == 'exact']
        exact_error = float((exact['bound'] - exact['v_star']).abs().max())
        result.check('exact_scheme_reproduces_v_star', exact_error <= tol,
                     f'max |bound - V*| = {exact_error:.3g}')
        minimized = table[table['direction'] == Direction.MINIMIZE.name.lower()]
        result.check('minimize_instances_valid', bool(minimized['valid'].all()),
                     f'{int(minimized["valid"].sum())}/{len(minimized)} valid')

        result.summary = {
            'instances': self.section.n_instances,
            'pairs': len(table),
            'passes': int(table['valid'].sum()),
            'worst_slack': float(table['slack'].min()),
        }
        for name, group in table.groupby('scheme', sort=False):
            result.summary[f'mean_slack_{name}'] = float(group['slack'].mean())
        return result
