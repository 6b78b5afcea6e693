from .config import RunConfig, load_config, save_config
from .link import RunReport, Transmitter, prepare, run_cell, run_link, send_view, write_rows
from .sweep import AXES, is_monotone, summarize, sweep
