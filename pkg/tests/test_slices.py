import tempfile
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

from core.errors import DataError, GenePanelError
from core.slices import Slice, load_slice, preprocess, save_slice, select_hvg, shared_panel

COORDS = "id,x,y,label\ns1,0.0,0.0,A\ns2,1.0,0.5,A\ns3,2.0,1.5,B\n"
DENSE = "id,g1,g2,g3\ns1,1,0,3\ns2,0,0,2\ns3,4,5,0\n"
TRIPLETS = "id,gene,value\ns1,g1,1\ns3,g1,4\ns3,g2,5\ns1,g3,3\ns2,g3,2\n"


def _write(tmp: Path, name: str, text: str) -> Path:
    path = tmp / name
    path.write_text(text, encoding="utf-8")
    return path


def _tmp() -> Path:
    return Path(tempfile.mkdtemp())


def test_dense_fixture_loads():
    tmp = _tmp()
    sl = load_slice(_write(tmp, "c.csv", COORDS), _write(tmp, "e.csv", DENSE))
    assert sl.n_spots == 3 and sl.genes == ["g1", "g2", "g3"]
    np.testing.assert_array_equal(sl.dense(), [[1, 0, 3], [0, 0, 2], [4, 5, 0]])
    assert sl.labels.tolist() == ["A", "A", "B"]


def test_triplets_match_dense():
    tmp = _tmp()
    coords = _write(tmp, "c.csv", COORDS)
    dense = load_slice(coords, _write(tmp, "e.csv", DENSE))
    trip = load_slice(coords, _write(tmp, "t.csv", TRIPLETS))
    assert trip.genes == dense.genes
    np.testing.assert_array_equal(trip.dense(), dense.dense())


def test_expression_rows_follow_coordinate_order():
    tmp = _tmp()
    shuffled = "id,g1,g2,g3\ns3,4,5,0\ns1,1,0,3\ns2,0,0,2\n"
    sl = load_slice(_write(tmp, "c.csv", COORDS), _write(tmp, "e.csv", shuffled))
    np.testing.assert_array_equal(sl.dense()[0], [1, 0, 3])


def test_negative_expression_lists_rows():
    tmp = _tmp()
    bad = "id,g1,g2\ns1,1,-2\ns2,0,1\ns3,-1,0\n"
    with pytest.raises(DataError) as err:
        load_slice(_write(tmp, "c.csv", COORDS), _write(tmp, "e.csv", bad))
    assert err.value.rows == ["s1", "s3"]


def test_id_mismatch_is_rejected():
    tmp = _tmp()
    extra = DENSE + "s9,1,1,1\n"
    with pytest.raises(DataError):
        load_slice(_write(tmp, "c.csv", COORDS), _write(tmp, "e.csv", extra))
    missing = "id,g1,g2,g3\ns1,1,0,3\ns2,0,0,2\n"
    with pytest.raises(DataError) as err:
        load_slice(_write(tmp, "c.csv", COORDS), _write(tmp, "m.csv", missing))
    assert err.value.rows == ["s3"]


def test_malformed_coordinates_are_rejected():
    tmp = _tmp()
    with pytest.raises(DataError):
        load_slice(_write(tmp, "c.csv", "id,x,y\ns1,0,abc\n"), _write(tmp, "e.csv", "id,g1\ns1,1\n"))
    with pytest.raises(DataError):
        load_slice(_write(tmp, "d.csv", "id,x\ns1,0\n"), _write(tmp, "e.csv", "id,g1\ns1,1\n"))


def _random_slice(n: int, g: int, seed: int) -> Slice:
    rng = np.random.default_rng(seed)
    expr = rng.poisson(0.7, size=(n, g)).astype(float)
    return Slice(
        [f"c{i}" for i in range(n)], rng.random((n, 2)) * 100, sparse.csr_matrix(expr),
        [f"gene{j}" for j in range(g)], rng.choice(["L1", "L2"], size=n),
    )


def test_save_load_round_trip_both_formats():
    tmp = _tmp()
    original = _random_slice(2000, 15, seed=1)
    for fmt in ("dense", "triplet"):
        save_slice(original, tmp / f"{fmt}_c.csv", tmp / f"{fmt}_e.csv", fmt)
        back = load_slice(tmp / f"{fmt}_c.csv", tmp / f"{fmt}_e.csv")
        assert back.ids == original.ids
        assert back.genes == original.genes
        np.testing.assert_allclose(back.coords, original.coords, rtol=1e-15)
        np.testing.assert_array_equal(back.dense(), original.dense())
        assert back.labels.tolist() == original.labels.tolist()


def test_constant_gene_is_never_highly_variable():
    rng = np.random.default_rng(2)
    values = rng.random((50, 4))
    values[:, 2] = 1.5
    keep = select_hvg(values, 4)
    assert 2 not in keep.tolist()
    assert keep.tolist() == [0, 1, 3]


def test_planted_variable_genes_are_selected():
    rng = np.random.default_rng(3)
    values = 1.0 + 0.01 * rng.random((80, 10))
    values[:, [2, 7]] = rng.random((80, 2)) * 3.0
    assert select_hvg(values, 2).tolist() == [2, 7]
    assert select_hvg(values, 10).tolist() == list(range(10))


def test_shared_panel_and_preprocess():
    src = _random_slice(40, 12, seed=4)
    ref = _random_slice(50, 12, seed=5)
    ref.genes[0] = "other"
    assert shared_panel(src, ref) == [f"gene{j}" for j in range(1, 12)]
    s, r, report = preprocess(src, ref, n_hvg=5)
    assert report.shared_genes == 11 and report.hvg_genes == 5
    assert s.log_expr.shape == (40, 5) and r.log_expr.shape == (50, 5)
    both = np.vstack([s.scaled, r.scaled])
    np.testing.assert_allclose(both.mean(axis=0), 0.0, atol=1e-12)
    assert s.genes == r.genes


def test_disjoint_panels_fail():
    src = _random_slice(5, 3, seed=6)
    ref = Slice(list(src.ids), src.coords, src.expr, ["x", "y", "z"])
    with pytest.raises(GenePanelError):
        shared_panel(src, ref)
