import logging
import logging.config
import os
from pathlib import Path

from src.app_paths import LOG_DIR

_REPO_ROOT = Path(__file__).resolve().parent.parent


def _configure_logging() -> None:
    log_conf_path = Path(os.getenv("TREEGLASS_LOGGING_CONF", _REPO_ROOT / "logging.conf"))
    log_dir = _REPO_ROOT / LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)

    if log_conf_path.exists():
        logging.config.fileConfig(
            log_conf_path,
            disable_existing_loggers=False,
            defaults={"logdirpath": log_dir.as_posix()},
        )
    else:
        logging.basicConfig(level=logging.INFO)


_configure_logging()

logger = logging.getLogger("treeglass")
