import logging
from pathlib import Path

import pandas as pd
from textual.app import App, ComposeResult
from textual.binding import Binding
from textual.reactive import reactive
from textual.widgets import DataTable, Footer, Header, Static, Tab, Tabs


def find_result_files(out_dir: str | Path) -> list[Path]:
    """
    The CSV files of an output directory, sorted by name.
    """
    return sorted(Path(out_dir).glob('*.csv'))


class ResultsTable(DataTable):
    """
    DataTable showing one result CSV.
    """

    def __init__(self, **kwargs):
        super().__init__(zebra_stripes=True, **kwargs)
        self.cursor_type = 'row'

    def show_frame(self, frame: pd.DataFrame) -> None:
        self.clear(columns=True)
        self.add_columns(*(str(c) for c in frame.columns))
        for row in frame.itertuples(index=False):
            self.add_row(*(f'{v:.6g}' if isinstance(v, float) else str(v) for v in row))


class ResultsApp(App):
    """
    Browser for the CSV files of an output directory, one tab per file.

    Attributes:
        out_dir: The browsed directory.
        files: The CSV files found there.
        current_file: Stem of the displayed file.
    """
    TITLE = 'ADP bound results'
    BINDINGS = [
        ('q', 'quit', 'Quit'),
        Binding('left', 'previous_tab', 'Previous', priority=True),
        Binding('right', 'next_tab', 'Next', priority=True),
    ]
    out_dir: Path
    files: list[Path]
    current_file = reactive('')


    def __init__(self, out_dir: str | Path):
        super().__init__()
        self.out_dir = Path(out_dir)
        self.files = find_result_files(self.out_dir)

    def compose(self) -> ComposeResult:
        """
        Creates the child widgets.
        """
        yield Header()
        if self.files:
            yield Tabs(*(Tab(path.stem, id=f'tab-{index}')
                         for index, path in enumerate(self.files)), id='result_tabs')
            yield ResultsTable(id='results_table')
        else:
            yield Static(f'No CSV files in {self.out_dir}', id='empty')
        yield Footer()

    def on_tabs_tab_activated(self, event: Tabs.TabActivated) -> None:
        """
        Loads the CSV behind the activated tab.
        """
        if event.tab.id is None:
            return
        path = self.files[int(event.tab.id.removeprefix('tab-'))]
        table = self.query_one('#results_table', expect_type=ResultsTable)
        table.show_frame(pd.read_csv(path))
        self.current_file = path.stem
        logging.info(f'Showing {path}')

    def watch_current_file(self, name: str) -> None:
        self.sub_title = name

    def action_previous_tab(self) -> None:
        if self.files:
            self.query_one('#result_tabs', expect_type=Tabs).action_previous_tab()

    def action_next_tab(self) -> None:
        if self.files:
            self.query_one('#result_tabs', expect_type=Tabs).action_next_tab()
