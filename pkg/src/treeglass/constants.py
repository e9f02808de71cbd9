from pathlib import Path

from src.app_paths import CONFIG_DIR, RESULTS_DIR

SCHEMA_HEADER = "# treeglass-schema v1"

TREEGLASS_CONFIG_DIR = CONFIG_DIR / "treeglass"
TREEGLASS_EXAMPLES_DIR = TREEGLASS_CONFIG_DIR / "examples"
DEFAULT_RESULTS_DIR = RESULTS_DIR

# Value reached at the end of the f-inequality analysis; statements only need kappa > 1/100.
DEFAULT_KAPPA = 1.0 / 96.0

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_SIZE_GUARD = 3
EXIT_INEQUALITY = 4

CSV_FLOAT_FORMAT = "%.12g"
SIDECAR_SUFFIX = ".meta.json"

VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "networkx")

COMMANDS = (
    "exact-gap",
    "sweep-height",
    "sweep-beta",
    "spatial-mixing",
    "censoring",
    "blockdyn",
    "capacity",
    "speedup",
    "tmix",
    "lemma-scan",
)

EXAMPLE_CONFIG_PATH = Path(TREEGLASS_EXAMPLES_DIR / "exact_gap.example.json")
