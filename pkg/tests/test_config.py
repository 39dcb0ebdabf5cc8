import tempfile
from pathlib import Path

import pytest

from config import PipelineConfig, default_config, parse_config_text
from core.errors import ConfigError


def _tmp() -> Path:
    return Path(tempfile.mkdtemp())


def test_defaults_are_valid():
    cfg = default_config()
    assert cfg.validate() is cfg
    assert cfg.k_neighbors == 12 and cfg.lambda_r == 0.1 and cfg.num_freqs == 8


def test_key_value_text_with_comments():
    data = parse_config_text(
        "# run settings\nseed = 7\nlambda_j = 0.0  # off\nno_jacobian = true\nlog_level = DEBUG\n"
    )
    assert data == {"seed": 7, "lambda_j": 0.0, "no_jacobian": True, "log_level": "DEBUG"}


def test_load_json_and_key_value_files_agree():
    tmp = _tmp()
    (tmp / "a.json").write_text('{"seed": 3, "phase2_epochs": 10}', encoding="utf-8")
    (tmp / "b.cfg").write_text("seed = 3\nphase2_epochs = 10\n", encoding="utf-8")
    assert PipelineConfig.load(tmp / "a.json") == PipelineConfig.load(tmp / "b.cfg")


def test_overrides_win_over_file():
    tmp = _tmp()
    (tmp / "c.cfg").write_text("seed = 3\n", encoding="utf-8")
    assert PipelineConfig.load(tmp / "c.cfg", seed=11).seed == 11


def test_unknown_key_and_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"lambda_q": 1.0})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"batch_size": 2.5})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"lambda_r": -1.0})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"ema_decay": 1.5})
    with pytest.raises(ConfigError):
        parse_config_text("seed 3")
    with pytest.raises(ConfigError):
        PipelineConfig.load(_tmp() / "missing.cfg")


def test_bool_and_optional_coercion():
    cfg = PipelineConfig.from_dict({"skip_phase1": "true", "n_clusters": None, "allow_reflection": 0})
    assert cfg.skip_phase1 is True and cfg.n_clusters is None and cfg.allow_reflection is False


def test_save_round_trip_with_paths():
    tmp = _tmp()
    cfg = PipelineConfig.from_dict({
        "seed": 5,
        "paths": {"work_dir": str(tmp / "w"), "log_dir": str(tmp / "l"), "checkpoint_dir": str(tmp / "ck")},
    })
    cfg.save(tmp / "saved.json")
    back = PipelineConfig.load(tmp / "saved.json")
    assert back == cfg
    back.paths.ensure()
    assert (tmp / "ck").is_dir()
