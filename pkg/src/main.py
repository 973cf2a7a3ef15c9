import logger  # noqa: F401  # Sets up logging, not used in code, !first import!
import logging
import argparse
import sys
from pathlib import Path

from rich.console import Console

from model.config_model import (  # type: ignore
    SCALES, ConfigError, ExperimentKind, default_config, load_config
)
from controller.main_controller import MainController, PipelineError  # type: ignore
from view.report_view import save_results  # type: ignore
from view.results_app import ResultsApp  # type: ignore


SCRIPT_DIR = Path(__file__).parent.parent
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2

DEFAULT_CONFIGS = {
    ExperimentKind.ORACLE_VALIDATE: 'data/oracle.yaml',
    ExperimentKind.LQG_BOUNDS: 'data/lqg.yaml',
    ExperimentKind.COVERAGE_SWEEP: 'data/coverage.yaml',
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='adp-bounds',
        description='Performance bounds for approximate dynamic programming schemes.'
    )
    commands = parser.add_subparsers(dest='command', required=True)
    for kind in ExperimentKind:
        command = commands.add_parser(kind.value)
        command.add_argument('--config', type=str,
                             help=f'YAML file (default {DEFAULT_CONFIGS[kind]})')
        command.add_argument('--seed', type=int, help='Master seed')
        command.add_argument('--out', type=str, help='Output directory')
        command.add_argument('--scale', choices=SCALES, help='Scale preset')

    browse = commands.add_parser('browse')
    browse.add_argument('--out', type=str, default='results', help='Output directory')
    return parser


def run_experiment(args: argparse.Namespace, console: Console) -> int:
    """
    Loads the configuration, runs the pipeline and writes the reports.

    Returns:
        The process exit code.
    """
    kind = ExperimentKind(args.command)
    overrides = {'seed': args.seed, 'output_dir': args.out, 'scale': args.scale,
                 'experiment': kind}
    try:
        config_path = args.config or str(SCRIPT_DIR / DEFAULT_CONFIGS[kind])
        if args.config is None and not Path(config_path).exists():
            config = default_config(kind, args.scale or 'desk', args.seed or 0, args.out)
        else:
            config = load_config(config_path, **overrides)
    except (ConfigError, FileNotFoundError) as error:
        logging.error(f'Configuration error: {error}')
        console.print(f'[bold red]Configuration error:[/] {error}')
        return EXIT_ERROR

    try:
        result = MainController(config).run()
    except PipelineError as error:
        console.print(f'[bold red]Pipeline error in {error.stage}:[/] {error.cause}')
        return EXIT_ERROR

    save_results(result, config, console)
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    console = Console(record=True)

    if args.command == 'browse':
        ResultsApp(args.out).run()
        return EXIT_OK

    code = run_experiment(args, console)
    logging.info(f'Exit code {code}')
    return code


if __name__ == '__main__':
    sys.exit(main())
