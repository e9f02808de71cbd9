from pathlib import Path

# Single source of truth for data locations.
DATA_DIR = Path("data")
CONFIG_DIR = Path("config")
RESULTS_DIR = DATA_DIR / "treeglass"
LOG_DIR = DATA_DIR / "logs"
