import tempfile
from pathlib import Path

import numpy as np
import pytest

from core.checkpoint import load_checkpoint, save_checkpoint
from core.encoding import EncodingSpec
from core.errors import DataError
from core.fields import DeformNet, ExprDecoder, ExprField, network_state


def _state():
    enc = EncodingSpec(3, 2.0)
    return network_state(
        ExprField.build(enc, 1, hidden=8, num_layers=2, embed_dim=4),
        ExprDecoder.build(6, 2, embed_dim=4, hidden=8, num_hidden=1),
        DeformNet.build(enc, 3, hidden=8, trunk_layers=2, head_hidden=4),
    )


def test_round_trip_restores_parameters_and_meta():
    path = Path(tempfile.mkdtemp()) / "net.ckpt"
    state = _state()
    save_checkpoint(path, state, {"epoch": 4, "encoding": {"num_freqs": 3, "max_log_freq": 2.0}})
    loaded, meta = load_checkpoint(path)
    assert sorted(loaded) == sorted(state)
    for name, (params, spec) in state.items():
        got, got_spec = loaded[name]
        assert got_spec == spec
        assert np.array_equal(got.values, params.values)
        assert got.rng_seed == params.rng_seed
    assert meta["epoch"] == 4


def test_truncated_checkpoint_is_rejected():
    path = Path(tempfile.mkdtemp()) / "net.ckpt"
    save_checkpoint(path, _state(), {})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_foreign_file_is_rejected():
    tmp = Path(tempfile.mkdtemp())
    (tmp / "x.ckpt").write_bytes(b'{"format": "other"}\n')
    with pytest.raises(DataError):
        load_checkpoint(tmp / "x.ckpt")
    with pytest.raises(DataError):
        load_checkpoint(tmp / "absent.ckpt")
