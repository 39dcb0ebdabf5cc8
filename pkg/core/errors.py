from __future__ import annotations

from typing import Any, Dict, Optional, Sequence


class InstalignError(Exception):
    """Base class for every error raised by the alignment package."""


class DimensionError(InstalignError, ValueError):
    def __init__(self, what: str, expected: Any, actual: Any):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class NonFiniteError(InstalignError, FloatingPointError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class DataError(InstalignError, ValueError):
    def __init__(self, message: str, rows: Optional[Sequence[str]] = None):
        self.rows = list(rows or [])
        if self.rows:
            shown = ", ".join(str(r) for r in self.rows[:20])
            more = "" if len(self.rows) <= 20 else f" (+{len(self.rows) - 20} more)"
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class GenePanelError(DataError):
    pass


class ConfigError(InstalignError, ValueError):
    pass


class CollapseError(InstalignError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)
