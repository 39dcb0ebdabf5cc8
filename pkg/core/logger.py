from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Callable, Optional

DEFAULT_MAX_BYTES = 2 * 1024 * 1024
DEFAULT_BACKUP_COUNT = 3
LOGGER_NAME = "instalign"
_sinks: list[Callable[[str], None]] = []


class CallbackHandler(logging.Handler):
    """Forward formatted records to registered progress callbacks."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            msg = self.format(record)
        except Exception:
            msg = record.getMessage()
        for cb in list(_sinks):
            try:
                cb(msg)
            except Exception:
                # A failing sink must not break training.
                pass


def setup_logging(log_dir: Optional[Path] = None, level: str = "INFO") -> logging.Logger:
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    if getattr(logger, "_configured", False):
        return logger

    formatter = logging.Formatter(
        fmt="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / "instalign.log"
        fh = RotatingFileHandler(
            log_path,
            maxBytes=DEFAULT_MAX_BYTES,
            backupCount=DEFAULT_BACKUP_COUNT,
            encoding="utf-8",
        )
        fh.setFormatter(formatter)
        logger.addHandler(fh)
        logger.debug("Logger initialized at %s", log_path)

    ch = logging.StreamHandler()
    ch.setFormatter(formatter)
    logger.addHandler(ch)

    if not any(isinstance(h, CallbackHandler) for h in logger.handlers):
        cb = CallbackHandler()
        cb.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(cb)
    logger._configured = True  # type: ignore[attr-defined]
    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    base = logging.getLogger(LOGGER_NAME)
    if name is None:
        return base
    if name.startswith("core."):
        name = name[len("core.") :]
    return base.getChild(name)


def register_sink(callback: Callable[[str], None]) -> None:
    if callback not in _sinks:
        _sinks.append(callback)
    # Sinks need a handler even when setup_logging() was never called (library use).
    base = logging.getLogger(LOGGER_NAME)
    if not any(isinstance(h, CallbackHandler) for h in base.handlers):
        cb = CallbackHandler()
        cb.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        base.addHandler(cb)
    if base.level == logging.NOTSET:
        base.setLevel(logging.INFO)


def clear_sinks() -> None:
    _sinks.clear()
