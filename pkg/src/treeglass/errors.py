from __future__ import annotations

from typing import Any


class TreeglassError(RuntimeError):
    """Base class for failures raised by the treeglass package."""


class ConfigError(TreeglassError, ValueError):
    pass


class SizeGuardError(TreeglassError):
    def __init__(self, what: str, size: int, limit: int) -> None:
        super().__init__(f"{what} too large: {size} exceeds limit {limit}")
        self.what = what
        self.size = size
        self.limit = limit


class InequalityViolation(TreeglassError):
    def __init__(self, message: str, row: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.row = row or {}


class ConvergenceError(TreeglassError):
    def __init__(self, message: str, residual: float) -> None:
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual
