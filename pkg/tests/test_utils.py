import tempfile
from pathlib import Path

import pandas as pd
import pytest

from core.utils import atomic_write_text, stable_digest, staged_dir, write_csv, write_json


def _tmp() -> Path:
    return Path(tempfile.mkdtemp())


def test_atomic_write_leaves_no_temp_files():
    tmp = _tmp()
    atomic_write_text(tmp / "a.txt", "one")
    atomic_write_text(tmp / "a.txt", "two")
    assert (tmp / "a.txt").read_text(encoding="utf-8") == "two"
    assert [p.name for p in tmp.iterdir()] == ["a.txt"]


def test_write_csv_uses_lf_and_round_trip_floats():
    path = _tmp() / "f.csv"
    write_csv(path, pd.DataFrame({"id": ["s0"], "x": [0.1 + 0.2]}))
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    assert pd.read_csv(path)["x"][0] == 0.1 + 0.2


def test_write_json_is_sorted():
    path = _tmp() / "r.json"
    write_json(path, {"b": 1, "a": 2})
    assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')


def test_stable_digest_ignores_key_order():
    assert stable_digest({"a": 1, "b": [1, 2]}) == stable_digest({"b": [1, 2], "a": 1})
    assert stable_digest({"a": 1}) != stable_digest({"a": 2})


def test_staged_dir_publishes_only_on_success():
    tmp = _tmp()
    with staged_dir(tmp / "ok") as stage:
        (stage / "x.txt").write_text("x", encoding="utf-8")
    assert (tmp / "ok" / "x.txt").exists()

    with pytest.raises(RuntimeError):
        with staged_dir(tmp / "failed") as stage:
            (stage / "x.txt").write_text("x", encoding="utf-8")
            raise RuntimeError("boom")
    assert not (tmp / "failed").exists()
    assert sorted(p.name for p in tmp.iterdir()) == ["ok"]
