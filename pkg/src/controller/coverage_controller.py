import logging

import pandas as pd

from model.config_model import CoverageSection, ExperimentConfig, ExperimentKind  # type: ignore
from model.horizon_model import spawn_seeds  # type: ignore
from model.submod_model import CLASSIC_BOUND, SubmodMode  # type: ignore
from model.coverage_model import (  # type: ignore
    MissionScenario, build_paper_scenario, build_reduced_scenario, lattice_distances,
    sweep_bounds
)
from controller.main_controller import ExperimentResult, pipeline_stage  # type: ignore


BOUND_TOLERANCE = 1e-12


class CoverageController:
    """
    Sweeps the greedy sensor-placement bounds over the initial decay rate.

    The full run uses the 50 x 40 mission; the reduced run draws small
    brute-forceable missions and also reports f(OPT).

    Attributes:
        config: The experiment configuration.
        section: Its coverage section.
    """
    config: ExperimentConfig
    section: CoverageSection


    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.section = config.coverage

    def sweep(self, scenario: MissionScenario, with_opt: bool) -> pd.DataFrame:
        """
        Both panels, SET first, for one scenario.
        """
        distances = lattice_distances(scenario)
        grid = self.section.lambda0_grid()
        panels = [
            sweep_bounds(scenario, grid, mode, with_opt=with_opt, distances=distances)
            for mode in (SubmodMode.SET, SubmodMode.STRING)
        ]
        return pd.concat(panels, ignore_index=True)

    def run_full(self) -> pd.DataFrame:
        s = self.section
        with pipeline_stage('scenario'):
            scenario = build_paper_scenario(
                self.config.seed, s.lambda0_min, s.zeta, s.horizon, s.stride)
        logging.info(f'Mission with {len(scenario.candidates)} candidates, H={s.horizon}')
        with pipeline_stage('sweep'):
            return self.sweep(scenario, with_opt=False)

    def run_reduced(self) -> pd.DataFrame:
        s = self.section
        tables = []
        for index, seed in enumerate(spawn_seeds(self.config.seed, s.n_reduced)):
            with pipeline_stage(f'reduced instance {index}'):
                scenario = build_reduced_scenario(
                    seed, s.reduced_width, s.reduced_height, s.n_feasible,
                    s.reduced_horizon, s.lambda0_min, s.zeta)
                table = self.sweep(scenario, with_opt=True)
            table.insert(0, 'instance', index)
            tables.append(table)
        return pd.concat(tables, ignore_index=True)

    def run(self) -> ExperimentResult:
        if self.section.reduced:
            table = self.run_reduced()
            name = 'coverage_reduced'
        else:
            table = self.run_full()
            name = 'coverage_sweep'

        result = ExperimentResult(ExperimentKind.COVERAGE_SWEEP, tables={name: table})
        dominance = table['beta2'] >= table['beta1'] - BOUND_TOLERANCE
        result.check('beta2_dominates_beta1', bool(dominance.all()),
                     f'{int(dominance.sum())}/{len(table)} rows')
        in_range = (table['beta2'] > 0.0) & (table['beta2'] <= 1.0 + BOUND_TOLERANCE)
        result.check('beta2_in_unit_interval', bool(in_range.all()),
                     f'{int(in_range.sum())}/{len(table)} rows')

        if self.section.reduced:
            ratio = table['f_greedy'] / table['f_opt']
            for column in ('beta1', 'beta2'):
                valid = ratio >= table[column] - BOUND_TOLERANCE
                result.check(f'{column}_below_true_ratio', bool(valid.all()),
                             f'{int(valid.sum())}/{len(table)} rows')
            sets = table['mode'] == SubmodMode.SET.value
            valid = ratio[sets] >= CLASSIC_BOUND - BOUND_TOLERANCE
            result.check('beta0_below_true_ratio_set', bool(valid.all()),
                         f'{int(valid.sum())}/{int(sets.sum())} rows')
            result.summary['min_true_ratio'] = float(ratio.min())

        for mode, group in table.groupby('mode', sort=False):
            result.summary[f'{mode}_mean_beta1'] = float(group['beta1'].mean())
            result.summary[f'{mode}_mean_beta2'] = float(group['beta2'].mean())
        result.summary['rows'] = len(table)
        return result

