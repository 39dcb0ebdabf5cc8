from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

from core.errors import ConfigError

APP_NAME = "instalign"
VERSION = "0.4.1"
DEFAULT_HOME = Path(os.environ.get("INSTALIGN_HOME") or Path.cwd()) / f".{APP_NAME}"


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _expand_path(value) -> Path:
    if isinstance(value, Path):
        return value
    return Path(os.path.expandvars(str(value))).expanduser()


@dataclass
class Paths:
    work_dir: Path = DEFAULT_HOME
    log_dir: Path = field(default_factory=lambda: DEFAULT_HOME / "logs")
    checkpoint_dir: Optional[Path] = None

    def ensure(self) -> "Paths":
        self.work_dir = _expand_path(self.work_dir)
        self.log_dir = _expand_path(self.log_dir)
        _ensure_dir(self.work_dir)
        _ensure_dir(self.log_dir)
        if self.checkpoint_dir is not None:
            self.checkpoint_dir = _ensure_dir(_expand_path(self.checkpoint_dir))
        return self

    def to_dict(self) -> Dict[str, Optional[str]]:
        return {
            "work_dir": str(self.work_dir),
            "log_dir": str(self.log_dir),
            "checkpoint_dir": str(self.checkpoint_dir) if self.checkpoint_dir else None,
        }


@dataclass
class PipelineConfig:
    seed: int = 0
    # training schedule
    phase1_epochs: int = 300
    phase2_epochs: int = 400
    batch_size: int = 512
    lr: float = 1e-3
    phase1_lr: float = 1e-3
    deform_pretrain_lr: float = 1e-3
    checkpoint_every: int = 10
    log_every: int = 25
    # loss weights
    lambda_r: float = 0.1
    lambda_j: float = 0.002
    lambda_f: float = 1.0
    # encoding
    num_freqs: int = 8
    max_log_freq: float = 6.0
    # networks
    embed_dim: int = 64
    field_hidden: int = 256
    field_layers: int = 4
    decoder_hidden: int = 256
    decoder_layers: int = 2
    deform_hidden: int = 128
    deform_layers: int = 6
    head_hidden: int = 64
    head_init_scale: float = 1e-4
    # matching
    k_neighbors: int = 12
    ema_decay: float = 0.95
    tau_init: float = 1.0
    jacobian_samples: int = 64
    pca_components: int = 30
    pca_spatial_k: int = 32
    target_smooth_k: int = 8
    collapse_area_ratio: float = 0.01
    # plateau schedule
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    # preprocessing and rigid stage
    n_hvg: int = 2000
    icp_max_iter: int = 100
    icp_tol: float = 1e-9
    n_rotations: int = 12
    allow_reflection: bool = False
    # evaluation
    ot_reg_scale: float = 0.01
    ot_max_iter: int = 1000
    ot_tol: float = 1e-7
    gmm_n_init: int = 10
    n_clusters: Optional[int] = None
    # ablations
    skip_phase1: bool = False
    skip_phase2: bool = False
    no_jacobian: bool = False
    log_level: str = "INFO"
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> "PipelineConfig":
        for name in ("lambda_r", "lambda_j", "lambda_f"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("phase1_epochs", "phase2_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "k_neighbors", "num_freqs", "embed_dim", "n_hvg"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.target_smooth_k < 0:
            raise ConfigError(f"target_smooth_k must be >= 0, got {self.target_smooth_k}")
        if self.collapse_area_ratio < 0:
            raise ConfigError(f"collapse_area_ratio must be >= 0, got {self.collapse_area_ratio}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.field_layers < 1 or self.deform_layers < 1 or self.decoder_layers < 0:
            raise ConfigError("network depths must be positive")
        return self

    @classmethod
    def load(cls, path: Optional[Path] = None, **overrides: Any) -> "PipelineConfig":
        data: Dict[str, Any] = {}
        if path is not None:
            cfg_path = Path(path)
            if not cfg_path.exists():
                raise ConfigError(f"config file not found: {cfg_path}")
            data = parse_config_text(cfg_path.read_text(encoding="utf-8"))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs: Dict[str, Any] = {}
        for name, value in data.items():
            if name == "paths":
                paths_data = value or {}
                kwargs["paths"] = Paths(
                    work_dir=_expand_path(paths_data.get("work_dir", DEFAULT_HOME)),
                    log_dir=_expand_path(paths_data.get("log_dir", DEFAULT_HOME / "logs")),
                    checkpoint_dir=(
                        _expand_path(paths_data["checkpoint_dir"])
                        if paths_data.get("checkpoint_dir")
                        else None
                    ),
                )
                continue
            kwargs[name] = _coerce(name, str(known[name].type), value)
        return cls(**kwargs).validate()

    def to_dict(self) -> Dict[str, Any]:
        out = {k: v for k, v in asdict(self).items() if k != "paths"}
        out["paths"] = self.paths.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Path) -> None:
        from core.utils import atomic_write_text

        atomic_write_text(Path(path), self.to_json())


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse a JSON object or `key = value` lines with JSON-literal values."""
    stripped = text.strip()
    if not stripped:
        return {}
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return data
    data: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        try:
            data[key] = json.loads(value)
        except json.JSONDecodeError:
            # bare words are accepted as strings
            data[key] = value
    return data


def _coerce(name: str, type_name: str, value: Any) -> Any:
    optional = type_name.startswith("Optional[")
    base = type_name[len("Optional[") : -1] if optional else type_name
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name} must not be null")
    try:
        if base == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
                return value.lower() in ("true", "1")
            if isinstance(value, (int, float)) and value in (0, 1):
                return bool(value)
            raise ValueError(value)
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if base == "str":
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot interpret {value!r} as {base}") from exc
    raise ConfigError(f"{name}: unsupported config type {type_name}")


def default_config() -> PipelineConfig:
    return PipelineConfig()
