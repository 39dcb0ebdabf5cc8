from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import ot
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score
from sklearn.mixture import GaussianMixture

from core.errors import DataError
from core.fields import fold_fraction as _fold_fraction
from core.logger import get_logger
from core.matching import SpatialIndex, joint_pca

log = get_logger(__name__)

MARGINAL_TOL = 1e-6
GMM_RIDGE = 1e-6
GMM_MAX_ITER = 200
GMM_TOL = 1e-6


@dataclass
class TransportPlan:
    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    reg: float
    iterations: int
    converged: bool

    @property
    def marginal_error(self) -> float:
        return float(
            max(np.abs(self.plan.sum(axis=1) - self.a).max(), np.abs(self.plan.sum(axis=0) - self.b).max())
        )


@dataclass
class MetricReport:
    chamfer: float
    ot_acc: Optional[float] = None
    nn_acc: Optional[float] = None
    ari: Optional[float] = None
    nmi: Optional[float] = None
    pca_ari: Optional[float] = None
    pca_nmi: Optional[float] = None
    correspondence_error: Optional[float] = None
    fold_fraction: Optional[float] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricReport":
        return cls(**{k: data.get(k) for k in cls.__dataclass_fields__ if k in data})


def _points(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DataError(f"{what}: expected a nonempty (N, d) point set, got shape {p.shape}")
    return p


def _labels(labels: Optional[Sequence], n: int, what: str) -> np.ndarray:
    if labels is None:
        raise DataError(f"{what}: labels are required")
    arr = np.asarray(labels)
    if arr.shape[0] != n:
        raise DataError(f"{what}: {arr.shape[0]} labels for {n} points")
    return arr


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared nearest-neighbor distance A->B plus B->A."""
    a, b = _points(a, "chamfer A"), _points(b, "chamfer B")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def nn_accuracy(
    aligned_src: np.ndarray, src_labels: Sequence, ref: np.ndarray, ref_labels: Sequence
) -> float:
    """Fraction of source points whose nearest reference point carries the same label."""
    aligned_src, ref = _points(aligned_src, "nn_accuracy source"), _points(ref, "nn_accuracy reference")
    sl = _labels(src_labels, aligned_src.shape[0], "nn_accuracy source")
    rl = _labels(ref_labels, ref.shape[0], "nn_accuracy reference")
    idx, _ = SpatialIndex(ref).query(aligned_src, 1)
    return float(np.mean(rl[idx.reshape(-1)] == sl))


def sinkhorn_plan(
    ref: np.ndarray,
    src: np.ndarray,
    reg_scale: float = 0.01,
    max_iter: int = 1000,
    tol: float = 1e-7,
) -> TransportPlan:
    """Entropic OT between uniform measures; rows index ``ref``, columns ``src``."""
    ref, src = _points(ref, "sinkhorn reference"), _points(src, "sinkhorn source")
    M = ot.dist(ref, src, metric="sqeuclidean")
    a = np.full(ref.shape[0], 1.0 / ref.shape[0])
    b = np.full(src.shape[0], 1.0 / src.shape[0])
    mean_cost = float(M.mean())
    reg = reg_scale * mean_cost if mean_cost > 0 else reg_scale
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        plan, info = ot.sinkhorn(
            a, b, M, reg, method="sinkhorn_log", numItermax=max_iter, stopThr=tol, log=True
        )
    result = TransportPlan(
        plan=np.asarray(plan), a=a, b=b, reg=reg,
        iterations=int(info.get("niter", max_iter)), converged=not caught,
    )
    err = result.marginal_error
    if caught or err > MARGINAL_TOL:
        result.converged = False
        log.warning("Sinkhorn did not converge in %d iterations (marginal error %.2e); using last plan",
                    max_iter, err)
    return result


def ot_accuracy(
    aligned_src: np.ndarray,
    src_labels: Sequence,
    ref: np.ndarray,
    ref_labels: Sequence,
    reg_scale: float = 0.01,
    max_iter: int = 1000,
    tol: float = 1e-7,
) -> float:
    """Transported mass between equally labeled points."""
    aligned_src, ref = _points(aligned_src, "ot_accuracy source"), _points(ref, "ot_accuracy reference")
    sl = _labels(src_labels, aligned_src.shape[0], "ot_accuracy source")
    rl = _labels(ref_labels, ref.shape[0], "ot_accuracy reference")
    tp = sinkhorn_plan(ref, aligned_src, reg_scale, max_iter, tol)
    agree = rl[:, None] == sl[None, :]
    return float(np.clip((tp.plan * agree).sum() / tp.plan.sum(), 0.0, 1.0))


def _reseed_empty(gm: GaussianMixture, X: np.ndarray) -> bool:
    labels = gm.predict(X)
    counts = np.bincount(labels, minlength=gm.n_components)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return False
    cov_all = np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1]) + GMM_RIDGE * np.eye(X.shape[1])
    chol = np.linalg.cholesky(cov_all)
    prec_chol = solve_triangular(chol, np.eye(X.shape[1]), lower=True).T
    for c in empty:
        d2 = ((X[:, None, :] - gm.means_[None, :, :]) ** 2).sum(axis=-1).min(axis=1)
        far = int(np.argmax(d2))
        gm.means_[c] = X[far]
        gm.covariances_[c] = cov_all
        gm.precisions_cholesky_[c] = prec_chol
        gm.weights_[c] = 1.0 / X.shape[0]
        log.warning("GMM: component %d empty, re-seeded from point %d", int(c), far)
    gm.weights_ = gm.weights_ / gm.weights_.sum()
    gm.precisions_ = np.einsum("kij,klj->kil", gm.precisions_cholesky_, gm.precisions_cholesky_)
    return True


def fit_gmm(
    X: np.ndarray, k: int, seed: int, max_iter: int = GMM_MAX_ITER, tol: float = GMM_TOL
) -> Tuple[GaussianMixture, list[float]]:
    """One EM run stepped an iteration at a time so the log-likelihood path is observable."""
    gm = GaussianMixture(
        n_components=k,
        covariance_type="full",
        reg_covar=GMM_RIDGE,
        max_iter=1,
        warm_start=True,
        init_params="random_from_data",
        random_state=seed,
    )
    history: list[float] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(max_iter):
            gm.fit(X)
            _reseed_empty(gm, X)
            ll = float(gm.score(X))
            converged = bool(history) and abs(ll - history[-1]) < tol
            history.append(ll)
            if converged:
                break
    return gm, history


def gmm_cluster(embeddings: np.ndarray, k: int, n_init: int = 10, seed: int = 0) -> np.ndarray:
    """Hard labels from the best-likelihood full-covariance Gaussian mixture."""
    X = np.asarray(embeddings, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return np.zeros(X.shape[0], dtype=np.int64)
    if X.shape[0] <= k:
        raise DataError(f"gmm_cluster needs more than {k} points, got {X.shape[0]}")
    best: Optional[GaussianMixture] = None
    best_ll = -np.inf
    for i in range(n_init):
        gm, history = fit_gmm(X, k, seed + i)
        if history[-1] > best_ll:
            best, best_ll = gm, history[-1]
    return best.predict(X).astype(np.int64)


def _pair(labels_a: Sequence, labels_b: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"label length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def ari(labels_a: Sequence, labels_b: Sequence) -> float:
    a, b = _pair(labels_a, labels_b)
    if a.shape[0] < 2:
        raise ValueError("ARI needs at least 2 labels")
    return float(adjusted_rand_score(a, b))


def nmi(labels_a: Sequence, labels_b: Sequence) -> float:
    a, b = _pair(labels_a, labels_b)
    if np.unique(a).size < 2 or np.unique(b).size < 2:
        return 0.0
    return float(normalized_mutual_info_score(a, b, average_method="arithmetic"))


def correspondence_error(aligned: np.ndarray, truth: np.ndarray) -> float:
    """Mean distance between aligned source points and their known partners."""
    aligned, truth = _points(aligned, "aligned"), _points(truth, "truth")
    if aligned.shape != truth.shape:
        raise DataError(f"correspondence shapes differ: {aligned.shape} vs {truth.shape}")
    return float(np.linalg.norm(aligned - truth, axis=1).mean())


def fold_fraction(J: np.ndarray) -> float:
    return _fold_fraction(np.asarray(J, dtype=np.float64).reshape(-1, 2, 2))


def _embedding_scores(
    emb: np.ndarray, truth: np.ndarray, k: int, n_init: int, seed: int
) -> Tuple[float, float]:
    pred = gmm_cluster(emb, k, n_init, seed)
    return ari(truth, pred), nmi(truth, pred)


def evaluate(
    aligned_src: np.ndarray,
    ref: np.ndarray,
    src_labels: Optional[Sequence] = None,
    ref_labels: Optional[Sequence] = None,
    embeddings: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    expression: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    truth: Optional[np.ndarray] = None,
    jacobians: Optional[np.ndarray] = None,
    ot_reg_scale: float = 0.01,
    ot_max_iter: int = 1000,
    ot_tol: float = 1e-7,
    gmm_n_init: int = 10,
    n_clusters: Optional[int] = None,
    pca_components: int = 30,
    seed: int = 0,
) -> MetricReport:
    """Every metric the available inputs allow.

    ``embeddings`` and ``expression`` are (ref, src) pairs; clustering scores need labels.
    """
    report = MetricReport(chamfer=chamfer_distance(aligned_src, ref))
    params: Dict[str, Any] = {"seed": seed}
    have_labels = src_labels is not None and ref_labels is not None
    if have_labels:
        report.nn_acc = nn_accuracy(aligned_src, src_labels, ref, ref_labels)
        report.ot_acc = ot_accuracy(aligned_src, src_labels, ref, ref_labels, ot_reg_scale, ot_max_iter, ot_tol)
        params.update(ot_reg_scale=ot_reg_scale, ot_max_iter=ot_max_iter, ot_tol=ot_tol)
        truth_labels = np.concatenate([np.asarray(ref_labels), np.asarray(src_labels)])
        k = n_clusters or int(np.unique(truth_labels).size)
        if embeddings is not None:
            emb = np.vstack([embeddings[0], embeddings[1]])
            report.ari, report.nmi = _embedding_scores(emb, truth_labels, k, gmm_n_init, seed)
        if expression is not None:
            _, ref_pc, src_pc = joint_pca(expression[0], expression[1], pca_components, seed)
            report.pca_ari, report.pca_nmi = _embedding_scores(
                np.vstack([ref_pc, src_pc]), truth_labels, k, gmm_n_init, seed
            )
        if embeddings is not None or expression is not None:
            params.update(gmm_k=k, gmm_n_init=gmm_n_init, gmm_ridge=GMM_RIDGE)
    if truth is not None:
        report.correspondence_error = correspondence_error(aligned_src, truth)
    if jacobians is not None and len(jacobians):
        report.fold_fraction = fold_fraction(jacobians)
    report.params = params
    return report
