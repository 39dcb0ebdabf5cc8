from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

import pandas as pd

from core.logger import get_logger

log = get_logger(__name__)


def _temp_sibling(dst: Path) -> Path:
    dst.parent.mkdir(parents=True, exist_ok=True)
    fd, name = tempfile.mkstemp(prefix=f".{dst.name}.", suffix=".tmp", dir=dst.parent)
    os.close(fd)
    return Path(name)


def atomic_replace(src: Path, dst: Path) -> Path:
    try:
        os.replace(src, dst)
        return dst
    finally:
        if src.exists():
            try:
                src.unlink()
            except OSError:
                pass


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    path = Path(path)
    tmp = _temp_sibling(path)
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    return atomic_replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, data: Any) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    """CSV with shortest round-trip float repr and LF line endings."""
    path = Path(path)
    tmp = _temp_sibling(path)
    frame.to_csv(tmp, index=False, lineterminator="\n")
    return atomic_replace(tmp, path)


def stable_digest(data: Any) -> str:
    raw = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


@contextmanager
def staged_dir(out_dir: Path) -> Iterator[Path]:
    """Yield a scratch directory whose files move into ``out_dir`` only on success."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield stage
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in sorted(stage.iterdir()):
            os.replace(item, out_dir / item.name)
    except BaseException:
        log.debug("Discarding staged outputs in %s", stage)
        raise
    finally:
        shutil.rmtree(stage, ignore_errors=True)
