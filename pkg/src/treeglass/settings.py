from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

from .constants import DEFAULT_KAPPA, DEFAULT_RESULTS_DIR

load_dotenv()


@dataclass(frozen=True)
class Settings:
    kappa: float = float(os.getenv("TREEGLASS_KAPPA", str(DEFAULT_KAPPA)))
    max_enum_free: int = int(os.getenv("TREEGLASS_MAX_ENUM_FREE", "24"))
    max_kernel_free: int = int(os.getenv("TREEGLASS_MAX_KERNEL_FREE", "15"))
    max_kernel_nonzeros: int = int(os.getenv("TREEGLASS_MAX_KERNEL_NONZEROS", str(1 << 24)))
    dense_max_states: int = int(os.getenv("TREEGLASS_DENSE_MAX_STATES", "4096"))
    power_tol: float = float(os.getenv("TREEGLASS_POWER_TOL", "1e-10"))
    power_max_iter: int = int(os.getenv("TREEGLASS_POWER_MAX_ITER", "1000000"))
    power_block_size: int = int(os.getenv("TREEGLASS_POWER_BLOCK_SIZE", "8"))
    uniformization_tail: float = float(os.getenv("TREEGLASS_UNIFORMIZATION_TAIL", "1e-12"))
    flow_max_states: int = int(os.getenv("TREEGLASS_FLOW_MAX_STATES", "1024"))
    results_dir: Path = Path(os.getenv("TREEGLASS_RESULTS_DIR", str(DEFAULT_RESULTS_DIR)))


settings = Settings()
