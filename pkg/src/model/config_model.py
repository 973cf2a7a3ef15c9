import os
import logging
import yaml
from dataclasses import dataclass, field, fields, asdict
from enum import Enum
from typing import Any, Callable

from model.lqg_model import LqgModel


class ExperimentKind(Enum):
    """
    Enum providing the experiment pipelines.
    """
    ORACLE_VALIDATE = 'oracle-validate'
    LQG_BOUNDS = 'lqg-bounds'
    COVERAGE_SWEEP = 'coverage-sweep'


class ErrorSource(Enum):
    """
    Where the LQG pipeline takes its stepwise errors from.
    """
    SCHEME = 'scheme'
    LEARNED = 'learned'


SCALES = ('ci', 'desk', 'paper')

# Scale knobs per preset; values in the config file take precedence
SCALE_PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    'ci': {
        'oracle': {'n_instances': 20},
        'lqg': {'n_traj': 500, 'n_rollouts': 100, 'n_test_states': 10, 'multistart': 8},
        'coverage': {'stride': 5, 'grid_points': 5, 'n_reduced': 5},
    },
    'desk': {
        'oracle': {'n_instances': 100},
        'lqg': {'n_traj': 10_000, 'n_rollouts': 500, 'n_test_states': 100, 'multistart': 32},
        'coverage': {'stride': 2, 'grid_points': 15, 'n_reduced': 20},
    },
    'paper': {
        'oracle': {'n_instances': 100},
        'lqg': {'n_traj': 1_000_000, 'n_rollouts': 500, 'n_test_states': 100, 'multistart': 32},
        'coverage': {'stride': 1, 'grid_points': 15, 'n_reduced': 20},
    },
}


class ConfigError(ValueError):
    """
    Raised for invalid configuration files.

    Attributes:
        path: The configuration file.
        line: 1-based line of the offending entry, None if unknown.
        message: What is wrong.
    """
    def __init__(self, path: str, line: int | None, message: str):
        location = path if line is None else f'{path}:{line}'
        super().__init__(f'{location}: {message}')
        self.path = path
        self.line = line
        self.message = message


class FieldError(ValueError):
    """
    Raised by section validation; names the offending field.
    """
    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field_name = field_name


def _as_int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) \
            or int(value) != value:
        raise ValueError(f'expected an integer, got {value!r}')
    return int(value)


def _as_float(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f'expected a number, got {value!r}')
    return float(value)


def _as_bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValueError(f'expected true or false, got {value!r}')
    return value


def _as_floats(value: Any) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ValueError(f'expected a list of numbers, got {value!r}')
    return tuple(_as_float(v) for v in value)


def _as_choice(*choices: str) -> Callable[[Any], str]:
    def convert(value: Any) -> str:
        if value not in choices:
            raise ValueError(f'expected one of {", ".join(choices)}, got {value!r}')
        return str(value)
    return convert


def option(default: Any, convert: Callable[[Any], Any], key: str | None = None) -> Any:
    """
    Dataclass field with its converter and YAML key.
    """
    return field(default=default, metadata={'convert': convert, 'key': key})


def _yaml_key(item) -> str:
    return item.metadata.get('key') or item.name


def _require(condition: bool, field_name: str, message: str) -> None:
    if not condition:
        raise FieldError(field_name, message)


@dataclass(slots=True, frozen=True)
class OracleSection:
    """
    Random discrete instances for the bound validation.

    Attributes:
        n_instances: Number of random instances (half of them minimized).
        max_states: Largest |X|.
        max_actions: Largest |U|.
        max_horizon: Largest H.
        noise_scales: Noise scales of the noisy-Q* schemes.
        tolerance: Absolute slack allowed in the checks.
    """
    n_instances: int = option(100, _as_int)
    max_states: int = option(6, _as_int)
    max_actions: int = option(4, _as_int)
    max_horizon: int = option(5, _as_int)
    noise_scales: tuple[float, ...] = option((0.05, 0.2, 1.0), _as_floats)
    tolerance: float = option(1e-9, _as_float)

    def __post_init__(self):
        _require(self.n_instances >= 1, 'n_instances', 'must be >= 1')
        _require(self.max_states >= 1, 'max_states', 'must be >= 1')
        _require(self.max_actions >= 1, 'max_actions', 'must be >= 1')
        _require(self.max_horizon >= 2, 'max_horizon', 'must be >= 2')
        _require(all(s >= 0 for s in self.noise_scales), 'noise_scales',
                 'must be non-negative')
        _require(self.tolerance >= 0, 'tolerance', 'must be non-negative')


@dataclass(slots=True, frozen=True)
class LqgSection:
    """
    LQG model, demonstration data and bound evaluation settings.
    """
    mass: float = option(1.0, _as_float, 'm')
    step: float = option(0.1, _as_float, 'T')
    horizon: int = option(10, _as_int, 'H')
    x0: tuple[float, ...] = option((0.0, 0.0, 0.0, 0.0), _as_floats)
    xf: tuple[float, ...] = option((100.0, 0.0, 100.0, 0.0), _as_floats)
    diag_q: tuple[float, ...] = option((10.0, 1.0, 10.0, 1.0), _as_floats, 'diagQ')
    diag_r: tuple[float, ...] = option((0.5, 0.5), _as_floats, 'diagR')
    diag_qf: tuple[float, ...] = option((500.0, 1000.0, 500.0, 1000.0), _as_floats, 'diagQf')
    diag_sigma: tuple[float, ...] = option((5.0, 2.0, 5.0, 2.0), _as_floats, 'diagSigma')
    n_traj: int = option(10_000, _as_int)
    n_rollouts: int = option(500, _as_int)
    n_test_states: int = option(100, _as_int)
    multistart: int = option(32, _as_int)
    init_spread: float = option(1.0, _as_float)
    test_spread: float = option(1.0, _as_float)
    action_dither: float = option(1.0, _as_float)
    ridge: float = option(1e-6, _as_float)
    margin: float = option(1.25, _as_float)
    exact_labels: bool = option(False, _as_bool)
    pin_terminal: bool = option(True, _as_bool)
    perturbation: float = option(0.0, _as_float)
    error_source: str = option('scheme', _as_choice('scheme', 'learned'))
    label_mode: str = option('closed', _as_choice('closed', 'sampled'))
    value_mode: str = option('exact', _as_choice('exact', 'rollout'))

    def __post_init__(self):
        _require(self.n_traj >= 1, 'n_traj', 'must be >= 1')
        _require(self.n_rollouts >= 2, 'n_rollouts', 'must be >= 2')
        _require(self.n_test_states >= 1, 'n_test_states', 'must be >= 1')
        _require(self.multistart >= 1, 'multistart', 'must be >= 1')
        _require(self.init_spread >= 0, 'init_spread', 'must be non-negative')
        _require(self.test_spread >= 0, 'test_spread', 'must be non-negative')
        _require(self.action_dither >= 0, 'action_dither', 'must be non-negative')
        _require(self.ridge >= 0, 'ridge', 'must be non-negative')
        _require(self.margin >= 1, 'margin', 'must be >= 1')
        _require(self.perturbation >= 0, 'perturbation', 'must be non-negative')
        # The model validates the physical parameters
        try:
            self.to_model()
        except ValueError as error:
            name = str(error).split()[0]
            names = {'mass': 'mass', 'step': 'step', 'horizon': 'horizon',
                     'x_initial': 'x0', 'x_target': 'xf', 'q_diag': 'diag_q',
                     'r_diag': 'diag_r', 'qf_diag': 'diag_qf', 'sigma_diag': 'diag_sigma'}
            raise FieldError(names.get(name, 'mass'), str(error)) from error

    @property
    def error_source_kind(self) -> ErrorSource:
        return ErrorSource(self.error_source)

    def to_model(self) -> LqgModel:
        return LqgModel(
            mass=self.mass,
            step=self.step,
            horizon=self.horizon,
            x_initial=self.x0,
            x_target=self.xf,
            q_diag=self.diag_q,
            r_diag=self.diag_r,
            qf_diag=self.diag_qf,
            sigma_diag=self.diag_sigma
        )


@dataclass(slots=True, frozen=True)
class CoverageSection:
    """
    Sensor-coverage sweep settings.
    """
    horizon: int = option(5, _as_int, 'H')
    zeta: float = option(0.1, _as_float)
    lambda0_min: float = option(0.1, _as_float)
    lambda0_max: float = option(1.5, _as_float)
    grid_points: int = option(15, _as_int)
    stride: int = option(1, _as_int)
    reduced: bool = option(False, _as_bool)
    n_reduced: int = option(20, _as_int)
    reduced_width: int = option(10, _as_int)
    reduced_height: int = option(8, _as_int)
    n_feasible: int = option(12, _as_int)
    reduced_horizon: int = option(3, _as_int)

    def __post_init__(self):
        _require(self.horizon >= 1, 'horizon', 'must be >= 1')
        _require(self.zeta > 0, 'zeta', 'must be positive for the string panel')
        _require(0 < self.lambda0_min <= self.lambda0_max, 'lambda0_min',
                 'must be positive and not above lambda0_max')
        _require(self.grid_points >= 1, 'grid_points', 'must be >= 1')
        _require(self.stride >= 1, 'stride', 'must be >= 1')
        _require(self.n_reduced >= 1, 'n_reduced', 'must be >= 1')
        _require(self.reduced_width >= 1, 'reduced_width', 'must be >= 1')
        _require(self.reduced_height >= 1, 'reduced_height', 'must be >= 1')
        _require(self.reduced_horizon >= 1, 'reduced_horizon', 'must be >= 1')
        _require(self.reduced_horizon <= self.n_feasible, 'n_feasible',
                 'must be at least reduced_horizon')
        _require(self.n_feasible <= self.reduced_width * self.reduced_height,
                 'n_feasible', 'exceeds the number of lattice points')

    def lambda0_grid(self) -> list[float]:
        if self.grid_points == 1:
            return [self.lambda0_min]
        spacing = (self.lambda0_max - self.lambda0_min) / (self.grid_points - 1)
        return [self.lambda0_min + i * spacing for i in range(self.grid_points)]


SECTIONS = {'oracle': OracleSection, 'lqg': LqgSection, 'coverage': CoverageSection}
TOP_LEVEL_KEYS = ('experiment', 'seed', 'output_dir', 'scale')


@dataclass(slots=True, frozen=True)
class ExperimentConfig:
    """
    Complete configuration of one experiment run.

    Attributes:
        experiment: Which pipeline to run.
        seed: Master seed.
        output_dir: Directory of the CSV and summary files.
        scale: Name of the scale preset the knobs were seeded from.
        oracle: Discrete validation settings.
        lqg: LQG pipeline settings.
        coverage: Coverage sweep settings.
    """
    experiment: ExperimentKind
    seed: int = 0
    output_dir: str = 'results'
    scale: str = 'desk'
    oracle: OracleSection = OracleSection()
    lqg: LqgSection = LqgSection()
    coverage: CoverageSection = CoverageSection()

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            'experiment': self.experiment.value,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'scale': self.scale,
        }
        for name in SECTIONS:
            section = getattr(self, name)
            values = asdict(section)
            data[name] = {
                _yaml_key(item): list(values[item.name])
                if isinstance(values[item.name], tuple) else values[item.name]
                for item in fields(section)
            }
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _line_index(node: yaml.Node, prefix: tuple[str, ...] = ()) \
-> dict[tuple[str, ...], int]:
    """
    Maps every key path of a composed YAML mapping to its 1-based line.
    """
    lines: dict[tuple[str, ...], int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_line_index(value_node, path))
    return lines


def _build_section(name: str, data: Any, preset: dict[str, Any],
                   lines: dict[tuple[str, ...], int], path: str):
    cls = SECTIONS[name]
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, lines.get((name,)), f'section "{name}" must be a mapping')

    keys = {_yaml_key(item): item for item in fields(cls)}
    for key in data:
        if key not in keys:
            raise ConfigError(path, lines.get((name, str(key))), f'unknown key "{name}.{key}"')

    values = {}
    for key, item in keys.items():
        if key in data:
            raw = data[key]
        elif item.name in preset:
            raw = preset[item.name]
        else:
            continue
        try:
            values[item.name] = item.metadata['convert'](raw)
        except (TypeError, ValueError) as error:
            raise ConfigError(path, lines.get((name, key)), f'{name}.{key}: {error}') from error

    try:
        return cls(**values)
    except FieldError as error:
        key = next((k for k, item in keys.items() if item.name == error.field_name),
                   error.field_name)
        line = lines.get((name, key), lines.get((name,)))
        raise ConfigError(path, line, f'{name}.{key}: {error}') from error


def from_yaml_text(text: str, path: str = '<config>', seed: int | None = None,
                   output_dir: str | None = None, scale: str | None = None,
                   experiment: ExperimentKind | None = None) -> ExperimentConfig:
    """
    Parses and validates a configuration.

    Precedence: command-line overrides, then file values, then the scale
    preset, then the defaults.

    Raises:
        ConfigError: With the line of the offending entry.
    """
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as error:
        mark = getattr(error, 'problem_mark', None)
        raise ConfigError(path, None if mark is None else mark.line + 1,
                          f'invalid YAML: {error}') from error

    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(path, 1, 'top level must be a mapping')
    lines = _line_index(node) if node is not None else {}

    for key in data:
        if key not in TOP_LEVEL_KEYS and key not in SECTIONS:
            raise ConfigError(path, lines.get((str(key),)), f'unknown key "{key}"')

    scale = scale or data.get('scale', 'desk')
    if scale not in SCALES:
        raise ConfigError(path, lines.get(('scale',)),
                          f'scale must be one of {", ".join(SCALES)}, got {scale!r}')

    if experiment is None:
        try:
            experiment = ExperimentKind(data.get('experiment'))
        except ValueError as error:
            raise ConfigError(path, lines.get(('experiment',)),
                              f'unknown experiment {data.get("experiment")!r}') from error

    if seed is None:
        try:
            seed = _as_int(data.get('seed', 0))
        except ValueError as error:
            raise ConfigError(path, lines.get(('seed',)), f'seed: {error}') from error
    if seed < 0:
        raise ConfigError(path, lines.get(('seed',)), 'seed must be non-negative')

    sections = {
        name: _build_section(name, data.get(name), SCALE_PRESETS[scale][name], lines, path)
        for name in SECTIONS
    }
    return ExperimentConfig(
        experiment=experiment,
        seed=seed,
        output_dir=str(output_dir or data.get('output_dir', 'results')),
        scale=scale,
        **sections
    )


def load_config(yaml_path: str, **overrides: Any) -> ExperimentConfig:
    """
    Loads the YAML configuration file.

    Args:
        yaml_path: The path to the YAML configuration file.
        overrides: seed, output_dir, scale or experiment from the command line.

    Raises:
        FileNotFoundError: If the YAML file does not exist.
        ConfigError: If the file is invalid.
    """
    # Check if yaml file exists
    if not os.path.exists(yaml_path):
        if not os.path.exists(f'../{yaml_path}'):
            raise FileNotFoundError(f'Config file "{yaml_path}" not found.')
        else:
            yaml_path = f'../{yaml_path}'

    with open(yaml_path, 'r', encoding='utf-8') as file:
        text = file.read()

    config = from_yaml_text(text, yaml_path, **overrides)
    logging.info(f'Loaded {config.experiment.value} config from {yaml_path} '
                 f'(scale {config.scale}, seed {config.seed})')
    return config


def default_config(experiment: ExperimentKind, scale: str = 'desk',
                   seed: int = 0, output_dir: str | None = None) -> ExperimentConfig:
    """
    Defaults seeded from a scale preset, as if read from an empty file.
    """
    return from_yaml_text('{}', '<defaults>', seed=seed, output_dir=output_dir, scale=scale,
                          experiment=experiment)
