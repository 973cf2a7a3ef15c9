import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
import pandas as pd

from model.config_model import ExperimentConfig, ExperimentKind  # type: ignore


class PipelineError(RuntimeError):
    """
    A model error tagged with the pipeline stage it occurred in.

    Attributes:
        stage: Name of the failing pipeline stage.
        cause: The original exception.
    """
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f'{stage}: {type(cause).__name__}: {cause}')
        self.stage = stage
        self.cause = cause


@contextmanager
def pipeline_stage(name: str) -> Iterator[None]:
    """
    Re-raises model errors inside the block as `PipelineError(name, ...)`.
    """
    try:
        yield
    except PipelineError:
        raise
    except (ValueError, RuntimeError, TypeError, KeyError, np.linalg.LinAlgError) as error:
        logging.error(f'Pipeline stage "{name}" failed: {error}')
        raise PipelineError(name, error) from error


@dataclass(slots=True, frozen=True)
class PropertyCheck:
    """
    One asserted property of an experiment.

    Attributes:
        name: Short identifier shown in the summary.
        passed: Whether the property holds.
        detail: Counts or the worst offending value.
    """
    name: str
    passed: bool
    detail: str = ''


@dataclass
class ExperimentResult:
    """
    Tables and checks produced by one experiment run.

    Attributes:
        experiment: The pipeline that ran.
        tables: CSV stem -> table, written in insertion order.
        checks: The asserted properties.
        summary: Headline numbers for the text report.
    """
    experiment: ExperimentKind
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    checks: list[PropertyCheck] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def check(self, name: str, passed: bool, detail: str = '') -> None:
        self.checks.append(PropertyCheck(name, bool(passed), detail))
        level = logging.INFO if passed else logging.WARNING
        logging.log(level, f'Check {name}: {"passed" if passed else "FAILED"} {detail}')


class MainController:
    """
    Dispatches an experiment configuration to its pipeline.

    Attributes:
        config: The experiment configuration.
    """
    config: ExperimentConfig


    def __init__(self, config: ExperimentConfig):
        self.config = config

    def run(self) -> ExperimentResult:
        """
        Runs the configured experiment.

        Raises:
            PipelineError: If a model step fails.
        """
        # Imported here so the controllers can import from this module
        from controller.oracle_controller import OracleController  # type: ignore
        from controller.lqg_controller import LqgController  # type: ignore
        from controller.coverage_controller import CoverageController  # type: ignore

        logging.info(f'Running {self.config.experiment.value} (seed {self.config.seed})')
        match self.config.experiment:
            case ExperimentKind.ORACLE_VALIDATE:
                return OracleController(self.config).run()
            case ExperimentKind.LQG_BOUNDS:
                return LqgController(self.config).run()
            case ExperimentKind.COVERAGE_SWEEP:
                return CoverageController(self.config).run()
