import logging
import math

import numpy as np
import pandas as pd

from model.config_model import ExperimentConfig, ExperimentKind, ErrorSource, LqgSection  # type: ignore
from model.horizon_model import ValueEstimate, estimate_value, spawn_seeds  # type: ignore
from model.bound_model import (  # type: ignore
    BoundReport, StepwiseErrorModel, assemble_bound, epsilons_continuous
)
from model.lqg_model import (  # type: ignore
    LqgModel, RiccatiSolution, affine_policy_cost, riccati_solve,
    simulate_affine_policy, value_to_go
)
from model.learn_model import (  # type: ignore
    DemoDataset, LabelKind, NonDefiniteBlockError, QuadraticModel, QuadraticScheme,
    build_error_model, build_scheme, exact_evtg_models, fit_dataset, generate_demos,
    scheme_error_model
)
from controller.main_controller import ExperimentResult, pipeline_stage  # type: ignore


LQG_COLUMNS = ['test_id', 'v_star', 'v_hat', 'v_hat_stderr', 'v_lower',
               'true_ratio', 'est_ratio']
RELATIVE_TOLERANCE = 1e-6
EXACT_RATIO_LIMIT = 1.001
EST_RATIO_LIMIT = 1.10
TRUE_RATIO_LIMIT = 1.05


class LqgController:
    """
    Lower-bounds the optimal cost of the LQG path-planning problem.

    Runs Riccati, demonstrations, fits, the scheme and its error model, then
    assembles one bound per test initial state.

    Attributes:
        config: The experiment configuration.
        section: Its lqg section.
        model: The LQG model built from the section.
    """
    config: ExperimentConfig
    section: LqgSection
    model: LqgModel


    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.section = config.lqg
        self.model = self.section.to_model()

    def value_models(self, sol: RiccatiSolution, dataset: DemoDataset) \
    -> tuple[QuadraticModel, ...]:
        """
        W^_1..W^_H: the exact quadratics or the fits to the demonstrations.
        """
        if self.section.exact_labels:
            return exact_evtg_models(sol, self.model)
        return fit_dataset(dataset, self.section.ridge)

    def error_model(self, scheme: QuadraticScheme, sol: RiccatiSolution,
                    dataset: DemoDataset, seed: np.random.SeedSequence) \
    -> StepwiseErrorModel:
        """
        delta_k either derived from the scheme or fitted to labelled records.
        """
        s = self.section
        if s.error_source_kind is ErrorSource.SCHEME:
            return scheme_error_model(scheme, self.model, dataset, s.margin, seed=seed)

        delta_seed, q0_seed = seed.spawn(2)
        deltas = generate_demos(
            self.model, sol, s.n_traj, s.init_spread, LabelKind.DELTA, delta_seed,
            action_dither=s.action_dither, sampled=s.label_mode == 'sampled'
        )
        q0_records = generate_demos(
            self.model, sol, s.n_traj, s.init_spread, LabelKind.Q_ZERO, q0_seed,
            action_dither=s.action_dither
        )
        q0 = fit_dataset(q0_records, s.ridge)[0]
        return build_error_model(q0, fit_dataset(deltas, s.ridge), deltas, s.margin)

    def test_states(self, seed: np.random.SeedSequence) -> np.ndarray:
        """
        Initial error states x - x_f with x ~ N(x_0, test_spread * I).
        """
        rng = np.random.default_rng(seed)
        x = rng.multivariate_normal(
            np.asarray(self.model.x_initial),
            self.section.test_spread * np.eye(self.model.state_dim),
            size=self.section.n_test_states,
            method='eigh'
        )
        return x - np.asarray(self.model.x_target)

    def policy_value(self, scheme: QuadraticScheme, z0: np.ndarray,
                     seed: np.random.SeedSequence) -> ValueEstimate:
        """
        Expected cost of the ADP policy from z0.

        Uses the affine form of the policy when every action block is
        positive definite; otherwise falls back to generic rollouts.
        """
        n_rollouts = self.section.n_rollouts
        try:
            gains, offsets = scheme.affine_gains()
        except NonDefiniteBlockError:
            local = scheme.at(z0)
            return estimate_value(local.problem, local.policy, n_rollouts, seed)

        if self.section.value_mode == 'exact':
            return ValueEstimate(affine_policy_cost(self.model, gains, offsets, z0), 0.0, 0)

        rollouts = simulate_affine_policy(
            self.model, gains, offsets, np.tile(z0, (n_rollouts, 1)),
            np.random.default_rng(seed)
        )
        costs = rollouts.costs
        return ValueEstimate(
            float(costs.mean()),
            float(costs.std(ddof=1)) / math.sqrt(n_rollouts),
            n_rollouts
        )

    def bound_at(self, scheme: QuadraticScheme, error_model: StepwiseErrorModel,
                 epsilons: tuple[float, ...], z0: np.ndarray,
                 seed: np.random.SeedSequence) -> BoundReport:
        local = scheme.at(z0)
        q0 = error_model.q0
        surrogate = None
        if error_model.metadata.get('source') == ErrorSource.LEARNED.value and q0 is not None:
            surrogate = lambda z, mu: float(q0(np.concatenate([z, mu])))
        return assemble_bound(
            local.problem, local, epsilons, self.section.n_rollouts, seed,
            value=self.policy_value(scheme, z0, seed),
            q0_surrogate=surrogate,
            metadata={**error_model.metadata, 'fallback_stages': scheme.fallback_stages}
        )

    def run(self) -> ExperimentResult:
        s = self.section
        demo_seed, perturb_seed, error_seed, eps_seed, test_seed, value_seed = \
            spawn_seeds(self.config.seed, 6)

        with pipeline_stage('riccati'):
            sol = riccati_solve(self.model)
        with pipeline_stage('demonstrations'):
            dataset = generate_demos(
                self.model, sol, s.n_traj, s.init_spread, LabelKind.EVTG, demo_seed,
                action_dither=s.action_dither
            )
        with pipeline_stage('fit'):
            models = self.value_models(sol, dataset)
        with pipeline_stage('scheme'):
            scheme = build_scheme(models, self.model, s.pin_terminal)
            if s.perturbation > 0.0:
                scheme = scheme.perturbed(s.perturbation, perturb_seed)
        with pipeline_stage('error model'):
            error_model = self.error_model(scheme, sol, dataset, error_seed)
            epsilons = epsilons_continuous(error_model, s.multistart, eps_seed)
        logging.info(f'Stepwise errors: {", ".join(f"{e:.4g}" for e in epsilons)}')

        rows = []
        states = self.test_states(test_seed)
        for test_id, (z0, seed) in enumerate(zip(states, value_seed.spawn(len(states)))):
            with pipeline_stage(f'test state {test_id}'):
                report = self.bound_at(scheme, error_model, epsilons, z0, seed)
            v_star = float(value_to_go(sol, self.model.noise_cov, 0, z0))
            v_hat = report.v_hat.mean
            rows.append({
                'test_id': test_id,
                'v_star': v_star,
                'v_hat': v_hat,
                'v_hat_stderr': report.v_hat.std_error,
                'v_lower': report.bound,
                'true_ratio': v_hat / v_star,
                'est_ratio': report.beta,
            })

        table = pd.DataFrame(rows, columns=LQG_COLUMNS)
        result = ExperimentResult(ExperimentKind.LQG_BOUNDS, tables={'lqg_bounds': table})
        self.check(result, table)
        result.summary = {
            'test_states': len(table),
            'epsilons': ' '.join(f'{e:.6g}' for e in epsilons),
            'error_source': s.error_source,
            'mean_true_ratio': float(table['true_ratio'].mean()),
            'mean_est_ratio': float(table['est_ratio'].mean()),
            'max_est_ratio': float(table['est_ratio'].max()),
            'fallback_stages': ' '.join(map(str, scheme.fallback_stages)) or 'none',
            'sampled_stages':
                ' '.join(map(str, error_model.metadata.get('sampled_stages', ()))) or 'none',
        }
        return result

    def check(self, result: ExperimentResult, table: pd.DataFrame) -> None:
        s = self.section
        tolerance = RELATIVE_TOLERANCE * table['v_star'].abs()
        lower_ok = table['v_lower'] <= table['v_star'] + tolerance
        result.check('v_lower_below_v_star', bool(lower_ok.all()),
                     f'{int(lower_ok.sum())}/{len(table)} rows')
        upper_ok = table['v_star'] <= table['v_hat'] + 3 * table['v_hat_stderr'] + tolerance
        result.check('v_star_below_v_hat', bool(upper_ok.all()),
                     f'{int(upper_ok.sum())}/{len(table)} rows')

        if s.perturbation > 0.0:
            return
        mean_est = float(table['est_ratio'].mean())
        if s.exact_labels or s.ridge == 0.0:
            result.check('exact_mode_est_ratio', mean_est <= EXACT_RATIO_LIMIT,
                         f'mean est_ratio {mean_est:.6f}')
        else:
            mean_true = float(table['true_ratio'].mean())
            result.check('mean_est_ratio', mean_est <= EST_RATIO_LIMIT,
                         f'{mean_est:.6f} <= {EST_RATIO_LIMIT}')
            result.check('mean_true_ratio', mean_true <= TRUE_RATIO_LIMIT,
                         f'{mean_true:.6f} <= {TRUE_RATIO_LIMIT}')
