import os
import tempfile

# Keep test runs from writing into the repository's log directory
os.environ.setdefault('ADP_BOUNDS_LOG_DIR', tempfile.mkdtemp(prefix='adp-bounds-log-'))
