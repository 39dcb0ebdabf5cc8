from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit
from sklearn.decomposition import PCA

from core.errors import DimensionError
from core.logger import get_logger

log = get_logger(__name__)

STATE_FLOOR = 1e-6
NORM_FLOOR = 1e-12
DICE_WEIGHT = 0.01
DICE_SMOOTH = 1.0
DICE_STEEPNESS = 50.0
TIE_RTOL = 1e-12


class SpatialIndex:
    """Exact kNN over 2-D points; ties broken by lower index."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise DimensionError("index points", "(N, 2)", points.shape)
        if points.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, q: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        n = len(self)
        k = min(k, n)
        # one extra candidate exposes ties straddling the k-th slot
        kk = min(k + 1, n)
        dist, idx = self._tree.query(q, k=kk)
        dist = dist.reshape(q.shape[0], kk)
        idx = idx.reshape(q.shape[0], kk)
        order = _tie_order(dist, idx)[:, :k]
        out_idx = np.take_along_axis(idx, order, axis=1).astype(np.int64)
        out_dist = np.take_along_axis(dist, order, axis=1)
        if kk > k:
            boundary = np.isclose(dist[:, k], dist[:, k - 1], rtol=TIE_RTOL, atol=0.0)
            for r in np.flatnonzero(boundary):
                radius = dist[r, k] * (1.0 + 2.0 * TIE_RTOL) + 1e-300
                i_row = np.asarray(self._tree.query_ball_point(q[r], radius), dtype=np.int64)
                d_row = np.sqrt(((self.points[i_row] - q[r]) ** 2).sum(axis=1))
                sel = _tie_order(d_row[None], i_row[None])[0, :k]
                out_idx[r] = i_row[sel]
                out_dist[r] = d_row[sel]
        if single:
            return out_idx[0], out_dist[0]
        return out_idx, out_dist


def _tie_order(dist: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Row-wise order by distance; distances within TIE_RTOL count as equal and go by index."""
    by_dist = np.lexsort((idx, dist), axis=1)
    d = np.take_along_axis(dist, by_dist, axis=1)
    i = np.take_along_axis(idx, by_dist, axis=1)
    step = d[:, 1:] > d[:, :-1] * (1.0 + TIE_RTOL)
    group = np.concatenate([np.zeros((d.shape[0], 1), dtype=np.int64), np.cumsum(step, axis=1)], axis=1)
    return np.take_along_axis(by_dist, np.lexsort((i, group), axis=1), axis=1)


def knn_query(index: SpatialIndex, q: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    return index.query(q, k)


@dataclass
class MatchState:
    s_sp: float = 1.0
    s_ft: float = 1.0
    tau: float = 1.0
    ema_decay: float = 0.95
    lambda_f: float = 1.0
    initialized: bool = False

    def to_dict(self) -> Dict[str, float]:
        return {"s_sp": self.s_sp, "s_ft": self.s_ft, "tau": self.tau}


@dataclass
class SoftAssignment:
    source_idx: int
    neighbor_idx: np.ndarray
    weights: np.ndarray


@dataclass
class MatchOutcome:
    loss: float
    grad: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    neighbors: np.ndarray
    mean_sq_dist: float
    mean_cos_dist: float
    mean_weighted_cost: float


def l2_normalize(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    return e / np.maximum(norm, NORM_FLOOR)


def _raw_terms(
    x: np.ndarray, e: np.ndarray, nbr_x: np.ndarray, nbr_e: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    diff = nbr_x - x[..., None, :]
    sq = (diff * diff).sum(axis=-1)
    cos = (l2_normalize(nbr_e) * l2_normalize(e)[..., None, :]).sum(axis=-1)
    return sq, 1.0 - cos


def match_cost(
    x: np.ndarray, e: np.ndarray, nbr_x: np.ndarray, nbr_e: np.ndarray, state: MatchState
) -> np.ndarray:
    """c = |x - x_i|^2 / s_sp + lambda_f (1 - <e_bar, e_i_bar>) / s_ft.

    ``x``/``e`` are one point (2,), (d,) or a batch (N, 2), (N, d); ``nbr_x``/``nbr_e``
    carry the K candidates per point. Embeddings enter as constants.
    """
    sq, cosd = _raw_terms(x, e, nbr_x, nbr_e)
    return sq / state.s_sp + state.lambda_f * cosd / state.s_ft


def soft_assign(costs: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = -np.asarray(costs, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def update_state(
    state: MatchState, mean_sq_dist: float, mean_cos_dist: float, mean_weighted_cost: float
) -> MatchState:
    d = state.ema_decay
    return replace(
        state,
        s_sp=max(d * state.s_sp + (1.0 - d) * mean_sq_dist, STATE_FLOOR),
        s_ft=max(d * state.s_ft + (1.0 - d) * mean_cos_dist, STATE_FLOOR),
        tau=max(d * state.tau + (1.0 - d) * mean_weighted_cost, STATE_FLOOR),
        initialized=True,
    )


def _centroid_pull(
    queries: np.ndarray,
    query_emb: np.ndarray,
    cand: np.ndarray,
    cand_emb: np.ndarray,
    index: SpatialIndex,
    state: MatchState,
    k: int,
) -> Tuple[MatchOutcome, MatchState]:
    """Each query is attracted to the soft-assigned centroid of its K nearest candidates.

    Returns the outcome (gradient wrt the queries) and the state seeded on first use.
    """
    if queries.shape[0] == 0:
        raise ValueError("empty batch")
    nbr, _ = index.query(queries, k)
    nbr = nbr.reshape(queries.shape[0], -1)
    nbr_x, nbr_e = cand[nbr], cand_emb[nbr]
    sq, cosd = _raw_terms(queries, query_emb, nbr_x, nbr_e)
    if not state.initialized:
        state = replace(
            state,
            s_sp=max(float(sq.mean()), STATE_FLOOR),
            s_ft=max(float(cosd.mean()), STATE_FLOOR),
        )
    costs = sq / state.s_sp + state.lambda_f * cosd / state.s_ft
    p = soft_assign(costs, state.tau)
    if not state.initialized:
        tau = max(float((p * costs).sum(axis=1).mean()), STATE_FLOOR)
        state = replace(state, tau=tau, initialized=True)
        p = soft_assign(costs, state.tau)
    targets = (p[..., None] * nbr_x).sum(axis=1)
    resid = queries - targets
    n = queries.shape[0]
    loss = float((resid * resid).sum(axis=1).mean())
    outcome = MatchOutcome(
        loss=loss,
        grad=2.0 * resid / n,
        targets=targets,
        weights=p,
        neighbors=nbr,
        mean_sq_dist=float(sq.mean()),
        mean_cos_dist=float(cosd.mean()),
        mean_weighted_cost=float((p * costs).sum(axis=1).mean()),
    )
    return outcome, state


def forward_match_loss(
    deformed_src: np.ndarray,
    src_emb: np.ndarray,
    ref_xy: np.ndarray,
    ref_emb: np.ndarray,
    state: MatchState,
    k: int = 12,
    index: Optional[SpatialIndex] = None,
) -> Tuple[MatchOutcome, MatchState]:
    """mean_j |x_hat_j - sum_i p_ij x_i|^2 with targets and weights held constant.

    ``grad`` is the gradient wrt ``deformed_src``; embeddings are a frozen prior.
    """
    index = index or SpatialIndex(ref_xy)
    return _centroid_pull(
        np.asarray(deformed_src, dtype=np.float64), src_emb, ref_xy, ref_emb, index, state, k
    )


def reverse_match_loss(
    ref_xy: np.ndarray,
    ref_emb: np.ndarray,
    deformed_src: np.ndarray,
    src_emb: np.ndarray,
    state: MatchState,
    k: int = 12,
) -> MatchOutcome:
    """Each reference point attracts the soft-assigned centroid of its nearest deformed
    source points; ``grad`` is wrt ``deformed_src``. The state is read, not advanced.
    """
    ref_xy = np.asarray(ref_xy, dtype=np.float64)
    deformed_src = np.asarray(deformed_src, dtype=np.float64)
    index = SpatialIndex(deformed_src)
    out, _ = _centroid_pull(ref_xy, ref_emb, deformed_src, src_emb, index, state, k)
    # d/dx_hat_j of |x_i - sum_j q_ij x_hat_j|^2 / M = -q_ij * grad_i
    g_src = np.zeros_like(deformed_src)
    np.add.at(g_src, out.neighbors, -out.weights[..., None] * out.grad[:, None, :])
    out.grad = g_src
    return out


def soft_assignments(outcome: MatchOutcome, query_idx: np.ndarray) -> list[SoftAssignment]:
    return [
        SoftAssignment(int(q), outcome.neighbors[r], outcome.weights[r])
        for r, q in enumerate(np.asarray(query_idx))
    ]


def log_normalize(counts: np.ndarray, target_sum: Optional[float] = None) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    if target_sum is None:
        nz = totals[totals > 0]
        target_sum = float(np.median(nz)) if nz.size else 1.0
    scale = np.where(totals > 0, target_sum / np.where(totals > 0, totals, 1.0), 0.0)
    return np.log1p(counts * scale)


def joint_pca(a: np.ndarray, b: np.ndarray, n_components: int, seed: int = 0) -> Tuple[PCA, np.ndarray, np.ndarray]:
    """PCA fitted on the stacked rows of both matrices; reduces the rank when degenerate."""
    stacked = np.vstack([a, b])
    centered = stacked - stacked.mean(axis=0)
    rank = int(np.linalg.matrix_rank(centered)) if centered.size else 0
    limit = max(1, min(n_components, rank, stacked.shape[0] - 1, stacked.shape[1]))
    if limit < n_components:
        log.warning("PCA: data rank %d, using %d of %d components", rank, limit, n_components)
    pca = PCA(n_components=limit, svd_solver="full", random_state=seed)
    scores = pca.fit_transform(stacked)
    return pca, scores[: a.shape[0]], scores[a.shape[0] :]


def pca_match_targets(
    src_expr: np.ndarray,
    ref_expr: np.ndarray,
    src_xy: np.ndarray,
    ref_xy: np.ndarray,
    n_components: int = 30,
    spatial_k: int = 32,
    normalize: bool = True,
) -> np.ndarray:
    """Per-source target coordinates: the reference point closest in joint-PCA space
    among the ``spatial_k`` spatially nearest reference points.

    Raw counts are log-normalized first; pass ``normalize=False`` for rows that
    are already preprocessed (e.g. ``ProcessedSlice.scaled``).
    """
    if src_expr.shape[1] != ref_expr.shape[1]:
        raise DimensionError("gene panel", ref_expr.shape[1], src_expr.shape[1])
    both = np.vstack([src_expr, ref_expr]).astype(np.float64)
    if normalize:
        both = log_normalize(both)
    _, src_f, ref_f = joint_pca(both[: src_expr.shape[0]], both[src_expr.shape[0] :], n_components)
    nbr, _ = SpatialIndex(ref_xy).query(src_xy, spatial_k)
    nbr = nbr.reshape(src_xy.shape[0], -1)
    feat_d = ((ref_f[nbr] - src_f[:, None, :]) ** 2).sum(axis=-1)
    best = nbr[np.arange(nbr.shape[0]), np.argmin(feat_d, axis=1)]
    return ref_xy[best].copy()


def smooth_targets(src_xy: np.ndarray, targets: np.ndarray, k: int = 8) -> np.ndarray:
    """Replace each displacement (target - x) by the coordinate-wise median over the
    point and its ``k`` nearest source neighbours."""
    src_xy = np.asarray(src_xy, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if src_xy.shape != targets.shape:
        raise DimensionError("target shape", src_xy.shape, targets.shape)
    if k <= 0 or src_xy.shape[0] < 2:
        return targets.copy()
    nbr, _ = SpatialIndex(src_xy).query(src_xy, k + 1)
    nbr = nbr.reshape(src_xy.shape[0], -1)
    disp = targets - src_xy
    return src_xy + np.median(disp[nbr], axis=1)


@dataclass
class ReconTerms:
    total: float
    masked_mse: float
    l1: float
    dice: float


def reconstruction_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[ReconTerms, np.ndarray]:
    """Masked MSE on nonzero targets + mean L1 + 0.01 soft-Dice on the zero pattern."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError("reconstruction shapes", target.shape, pred.shape)
    diff = pred - target
    mask = target != 0
    n_mask = int(mask.sum())
    if n_mask:
        mse = float((diff[mask] ** 2).sum() / n_mask)
        g_mse = 2.0 * diff * mask / n_mask
    else:
        mse = 0.0
        g_mse = np.zeros_like(pred)
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size

    t = (target > 0).astype(np.float64)
    s = expit(DICE_STEEPNESS * pred)
    inter = float((s * t).sum())
    denom = float(s.sum() + t.sum() + DICE_SMOOTH)
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom
    g_s = -(2.0 * t * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom)
    g_dice = g_s * DICE_STEEPNESS * s * (1.0 - s)

    total = mse + l1 + DICE_WEIGHT * dice
    grad = g_mse + g_l1 + DICE_WEIGHT * g_dice
    return ReconTerms(total, mse, l1, dice), grad
