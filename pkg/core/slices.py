from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse

from core.errors import DataError, GenePanelError
from core.logger import get_logger
from core.matching import log_normalize
from core.utils import write_csv

log = get_logger(__name__)

COORD_COLUMNS = ("id", "x", "y")
TRIPLET_COLUMNS = ["id", "gene", "value"]
PANEL_WARN_FRACTION = 0.5


@dataclass
class Slice:
    """One section: spot ids, coordinates, sparse expression, optional labels."""

    ids: List[str]
    coords: np.ndarray
    expr: sparse.csr_matrix
    genes: List[str]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.expr = sparse.csr_matrix(self.expr, dtype=np.float64)
        n = len(self.ids)
        if self.coords.shape != (n, 2):
            raise DataError(f"coords shape {self.coords.shape} does not match {n} ids")
        if self.expr.shape != (n, len(self.genes)):
            raise DataError(f"expression shape {self.expr.shape} does not match {n} x {len(self.genes)}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(str)
            if self.labels.shape[0] != n:
                raise DataError("label count does not match spot count")

    @property
    def n_spots(self) -> int:
        return len(self.ids)

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    def dense(self) -> np.ndarray:
        return self.expr.toarray()

    def select_genes(self, genes: Sequence[str]) -> "Slice":
        pos = {g: i for i, g in enumerate(self.genes)}
        cols = [pos[g] for g in genes]
        return Slice(list(self.ids), self.coords.copy(), self.expr[:, cols], list(genes), self.labels)

    def with_coords(self, coords: np.ndarray) -> "Slice":
        return Slice(list(self.ids), coords, self.expr, list(self.genes), self.labels)


@dataclass
class ProcessedSlice:
    ids: List[str]
    coords: np.ndarray
    genes: List[str]
    counts: np.ndarray
    log_expr: np.ndarray
    scaled: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def n_spots(self) -> int:
        return len(self.ids)


@dataclass
class PreprocessReport:
    shared_genes: int
    hvg_genes: int
    panel_fraction: float
    target_sum: float
    warnings: List[str] = field(default_factory=list)


def _bad_rows(what: str, rows: Sequence[str]) -> DataError:
    return DataError(what, [str(r) for r in rows])


def _read_csv(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed CSV {path}: {exc}") from exc


def _header(path: Path) -> List[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _numeric(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna()
    if bad.any():
        raise _bad_rows(f"{path}: non-numeric '{column}' values in rows", frame.loc[bad, "id"].tolist())
    return values.to_numpy(dtype=np.float64)


def load_coords(path: Path) -> Tuple[List[str], np.ndarray, Optional[np.ndarray]]:
    frame = _read_csv(path)
    missing = [c for c in COORD_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing coordinate columns {missing}")
    ids = frame["id"].str.strip()
    dup = ids[ids.duplicated()]
    if len(dup):
        raise _bad_rows(f"{path}: duplicate ids", dup.tolist())
    frame = frame.assign(id=ids)
    coords = np.column_stack([_numeric(frame, "x", path), _numeric(frame, "y", path)])
    labels = frame["label"].to_numpy(dtype=str) if "label" in frame.columns else None
    return ids.tolist(), coords, labels


def _check_genes(genes: Sequence[str], path: Path) -> None:
    seen, dup = set(), []
    for g in genes:
        if g in seen:
            dup.append(g)
        seen.add(g)
    if dup:
        raise DataError(f"{path}: duplicate gene names {sorted(set(dup))}")


def _load_dense(path: Path, ids: List[str]) -> Tuple[sparse.csr_matrix, List[str]]:
    header = _header(path)
    if not header or header[0] != "id":
        raise DataError(f"{path}: dense expression must start with an 'id' column")
    genes = header[1:]
    _check_genes(genes, path)
    frame = _read_csv(path)
    frame.columns = header
    row_ids = frame["id"].str.strip()
    unknown = sorted(set(row_ids) - set(ids))
    if unknown:
        raise _bad_rows(f"{path}: expression ids absent from coordinates", unknown)
    if row_ids.duplicated().any():
        raise _bad_rows(f"{path}: duplicate expression ids", row_ids[row_ids.duplicated()].tolist())
    present = set(row_ids)
    absent = [i for i in ids if i not in present]
    if absent:
        raise _bad_rows(f"{path}: coordinate ids without expression", absent)
    values = frame[genes].apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1)
    if bad.any():
        raise _bad_rows(f"{path}: non-numeric expression in rows", row_ids[bad].tolist())
    mat = values.to_numpy(dtype=np.float64)
    neg = (mat < 0).any(axis=1)
    if neg.any():
        raise _bad_rows(f"{path}: negative expression in rows", row_ids[neg].tolist())
    order = pd.Index(row_ids).get_indexer(ids)
    return sparse.csr_matrix(mat[order]), genes


def _load_triplets(path: Path, ids: List[str]) -> Tuple[sparse.csr_matrix, List[str]]:
    frame = _read_csv(path)
    frame["id"] = frame["id"].str.strip()
    frame["gene"] = frame["gene"].str.strip()
    unknown = sorted(set(frame["id"]) - set(ids))
    if unknown:
        raise _bad_rows(f"{path}: expression ids absent from coordinates", unknown)
    values = pd.to_numeric(frame["value"], errors="coerce")
    if values.isna().any():
        raise _bad_rows(f"{path}: non-numeric expression in rows", frame.loc[values.isna(), "id"].tolist())
    if (values < 0).any():
        raise _bad_rows(f"{path}: negative expression in rows", sorted(set(frame.loc[values < 0, "id"])))
    if frame.duplicated(["id", "gene"]).any():
        raise _bad_rows(f"{path}: repeated (id, gene) entries", frame.loc[frame.duplicated(["id", "gene"]), "id"].tolist())
    genes = list(pd.unique(frame["gene"]))
    rows = pd.Index(ids).get_indexer(frame["id"])
    cols = pd.Index(genes).get_indexer(frame["gene"])
    mat = sparse.coo_matrix(
        (values.to_numpy(dtype=np.float64), (rows, cols)), shape=(len(ids), len(genes))
    ).tocsr()
    mat.eliminate_zeros()
    return mat, genes


def load_slice(coords_path: Path, expr_path: Path) -> Slice:
    """Coordinates (``id,x,y[,label]``) plus dense or ``id,gene,value`` triplet expression."""
    coords_path, expr_path = Path(coords_path), Path(expr_path)
    ids, coords, labels = load_coords(coords_path)
    if not Path(expr_path).exists():
        raise DataError(f"file not found: {expr_path}")
    if _header(expr_path) == TRIPLET_COLUMNS:
        expr, genes = _load_triplets(expr_path, ids)
    else:
        expr, genes = _load_dense(expr_path, ids)
    log.info("Loaded slice %s: %d spots, %d genes", coords_path.stem, len(ids), len(genes))
    return Slice(ids, coords, expr, genes, labels)


def save_slice(sl: Slice, coords_path: Path, expr_path: Path, fmt: str = "dense") -> None:
    coords = pd.DataFrame({"id": sl.ids, "x": sl.coords[:, 0], "y": sl.coords[:, 1]})
    if sl.labels is not None:
        coords["label"] = sl.labels
    write_csv(Path(coords_path), coords)
    if fmt == "dense":
        frame = pd.DataFrame(sl.dense(), columns=sl.genes)
        frame.insert(0, "id", sl.ids)
    elif fmt == "triplet":
        coo = sl.expr.tocoo()
        # gene-major so first appearance reproduces the panel order
        order = np.lexsort((coo.row, coo.col))
        frame = pd.DataFrame({
            "id": np.asarray(sl.ids, dtype=object)[coo.row[order]],
            "gene": np.asarray(sl.genes, dtype=object)[coo.col[order]],
            "value": coo.data[order],
        })
    else:
        raise ValueError(f"unknown expression format: {fmt}")
    write_csv(Path(expr_path), frame)


def shared_panel(a: Slice, b: Slice) -> List[str]:
    in_b = set(b.genes)
    genes = [g for g in a.genes if g in in_b]
    if not genes:
        raise GenePanelError("slices share no genes")
    return genes


def select_hvg(log_values: np.ndarray, n_hvg: int) -> np.ndarray:
    """Column indices of the top ``n_hvg`` genes by variance/mean, in panel order.

    Constant genes have dispersion 0 and are never returned.
    """
    mean = log_values.mean(axis=0)
    var = log_values.var(axis=0)
    disp = np.where(mean > 0, var / np.where(mean > 0, mean, 1.0), 0.0)
    candidates = np.flatnonzero(var > 0)
    if candidates.size < n_hvg:
        log.warning("HVG: only %d variable genes for n_hvg=%d; keeping all of them", candidates.size, n_hvg)
        return candidates
    # stable: ties resolved by panel position
    ranked = candidates[np.argsort(-disp[candidates], kind="stable")]
    return np.sort(ranked[:n_hvg])


def preprocess(
    src: Slice, ref: Slice, n_hvg: int = 2000
) -> Tuple[ProcessedSlice, ProcessedSlice, PreprocessReport]:
    """Shared panel, median library-size normalization, log1p, HVG, per-gene z-scaling."""
    if n_hvg < 1:
        raise ValueError("n_hvg must be >= 1")
    genes = shared_panel(src, ref)
    warnings: List[str] = []
    fraction = len(genes) / max(src.n_genes, ref.n_genes)
    if fraction < PANEL_WARN_FRACTION:
        msg = f"shared gene panel keeps {len(genes)} genes ({fraction:.0%} of the larger panel)"
        log.warning(msg)
        warnings.append(msg)
    counts = sparse.vstack([src.select_genes(genes).expr, ref.select_genes(genes).expr]).toarray()
    totals = counts.sum(axis=1)
    nz = totals[totals > 0]
    target_sum = float(np.median(nz)) if nz.size else 1.0
    logged = log_normalize(counts, target_sum)
    keep = select_hvg(logged, n_hvg)
    if keep.size == 0:
        raise GenePanelError("no variable genes left after filtering")
    if keep.size < n_hvg:
        warnings.append(f"{keep.size} variable genes available for n_hvg={n_hvg}")
    logged, counts = logged[:, keep], counts[:, keep]
    mu = logged.mean(axis=0)
    sd = logged.std(axis=0)
    scaled = (logged - mu) / np.where(sd > 0, sd, 1.0)
    hvg = [genes[i] for i in keep]
    n = src.n_spots

    def _part(sl: Slice, rows: slice) -> ProcessedSlice:
        return ProcessedSlice(
            list(sl.ids), sl.coords.copy(), hvg, counts[rows], logged[rows], scaled[rows], sl.labels
        )

    report = PreprocessReport(len(genes), len(hvg), fraction, target_sum, warnings)
    log.info("Preprocess: %d shared genes, %d HVG, library size %.1f", len(genes), len(hvg), target_sum)
    return _part(src, slice(0, n)), _part(ref, slice(n, None)), report
