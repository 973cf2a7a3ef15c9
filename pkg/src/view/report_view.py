import logging
from pathlib import Path

import pandas as pd
from rich.console import Console
from rich.table import Table
from rich.text import Text

from model.config_model import ExperimentConfig  # type: ignore
from controller.main_controller import ExperimentResult  # type: ignore


FLOAT_FORMAT = '%.12g'


def write_table(table: pd.DataFrame, path: Path) -> None:
    """
    Writes a result table as CSV with a fixed float format, so reruns with
    the same seed give identical bytes.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, lineterminator='\n', float_format=FLOAT_FORMAT)
    logging.info(f'Wrote {len(table)} rows to {path}')


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f'{value:.6g}'
    return str(value)


def checks_table(result: ExperimentResult) -> Table:
    table = Table(title='Checks')
    table.add_column('Property')
    table.add_column('Result')
    table.add_column('Detail')
    for check in result.checks:
        verdict = Text('PASS', style='green') if check.passed else Text('FAIL', style='bold red')
        table.add_row(check.name, verdict, check.detail)
    return table


def summary_table(result: ExperimentResult) -> Table:
    table = Table(title='Summary')
    table.add_column('Quantity')
    table.add_column('Value', justify='right')
    for key, value in result.summary.items():
        table.add_row(key, _format_cell(value))
    return table


def preview_table(name: str, frame: pd.DataFrame, rows: int = 10) -> Table:
    """
    The first rows of a result table.
    """
    table = Table(title=f'{name} ({len(frame)} rows)')
    for column in frame.columns:
        table.add_column(str(column), justify='right')
    for _, row in frame.head(rows).iterrows():
        table.add_row(*(_format_cell(v) for v in row.tolist()))
    return table


def render_report(result: ExperimentResult, config: ExperimentConfig,
                  console: Console | None = None) -> str:
    """
    Prints the summary, the checks and table previews; returns them as text.
    """
    console = console or Console(record=True)
    verdict = 'all checks passed' if result.passed else 'some checks FAILED'
    console.rule(f'{result.experiment.value} (seed {config.seed}, scale {config.scale})')
    console.print(summary_table(result))
    console.print(checks_table(result))
    for name, frame in result.tables.items():
        console.print(preview_table(name, frame))
    console.print(f'Result: {verdict}')
    return console.export_text()


def save_results(result: ExperimentResult, config: ExperimentConfig,
                 console: Console | None = None) -> list[Path]:
    """
    Writes every table as `<stem>.csv` and the text report as
    `<experiment>_summary.txt` into the output directory.

    Returns:
        The written paths.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frame in result.tables.items():
        path = out_dir / f'{name}.csv'
        write_table(frame, path)
        written.append(path)

    summary_path = out_dir / f'{result.experiment.value}_summary.txt'
    summary_path.write_text(render_report(result, config, console), encoding='utf-8')
    (out_dir / f'{result.experiment.value}_config.yaml').write_text(
        config.to_yaml(), encoding='utf-8')
    written.append(summary_path)
    logging.info(f'Saved report to {summary_path}')
    return written
