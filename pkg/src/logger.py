import logging
import os
from pathlib import Path

SCRIPT_DIR = Path(__file__).parent.parent
LOG_DIR = Path(os.environ.get('ADP_BOUNDS_LOG_DIR', SCRIPT_DIR / 'log'))
LOG_FILE = LOG_DIR / 'adp_bounds.log'

LOG_DIR.mkdir(parents=True, exist_ok=True)

# One file per run; the CLI prints its own report to the console
logging.basicConfig(
    filename=LOG_FILE,
    filemode='w',
    level=logging.DEBUG,
    format='%(asctime)s [%(levelname)s] %(message)s'
)

# Textual and asyncio are chatty at DEBUG
for name in ('asyncio', 'textual'):
    logging.getLogger(name).setLevel(logging.WARNING)
