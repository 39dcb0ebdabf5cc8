from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from core.errors import DataError
from core.logger import get_logger
from core.matching import l2_normalize

log = get_logger(__name__)

CUTOFF_FACTOR = 3.0
SCORE_DECIMALS = 12


@dataclass
class RigidTransform:
    """x -> R x + t, mapping source coordinates into the reference frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    is_reflection: bool = False

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(2, 2)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)
        det = float(np.linalg.det(self.rotation))
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(2), atol=1e-8):
            raise ValueError("rotation is not orthonormal")
        if det < 0 and not self.is_reflection:
            raise ValueError("reflection matrix requires is_reflection=True")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_angle(
        cls, angle: float, translation: Sequence[float] = (0.0, 0.0), reflect: bool = False
    ) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s], [s, c]])
        if reflect:
            R = R @ np.diag([1.0, -1.0])
        return cls(R, np.asarray(translation, dtype=np.float64), reflect)

    @property
    def angle(self) -> float:
        R = self.rotation @ np.diag([1.0, -1.0]) if self.is_reflection else self.rotation
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.is_reflection != other.is_reflection,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, self.is_reflection)

    def to_dict(self) -> Dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "is_reflection": self.is_reflection,
            "angle_deg": float(np.degrees(self.angle)),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RigidTransform":
        return cls(np.array(data["rotation"]), np.array(data["translation"]), bool(data["is_reflection"]))


@dataclass
class IcpReport:
    iterations: int
    final_mean_sq_error: float
    selected_init_angle: float = 0.0
    expression_score: float = float("nan")
    history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "iterations": self.iterations,
            "final_mean_sq_error": self.final_mean_sq_error,
            "selected_init_angle_deg": float(np.degrees(self.selected_init_angle)),
            "expression_score": self.expression_score,
        }


@dataclass
class CoordinateScaler:
    mean: np.ndarray
    scale: float

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, data: Dict) -> "CoordinateScaler":
        return cls(np.asarray(data["mean"], dtype=np.float64), float(data["scale"]))


def fit_scaler(points: np.ndarray) -> CoordinateScaler:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise DataError("coordinate normalization needs at least 2 points")
    std = points.std(axis=0)
    scale = float(std.mean())
    if not np.isfinite(scale) or scale <= 0:
        raise DataError("coordinates have zero variance")
    return CoordinateScaler(points.mean(axis=0), scale)


def zscore_normalize(
    src: np.ndarray, ref: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, Tuple[CoordinateScaler, CoordinateScaler]]:
    """Center each slice and divide by one isotropic scale (mean of the two axis stds)."""
    s_src, s_ref = fit_scaler(src), fit_scaler(ref)
    return s_src.normalize(src), s_ref.normalize(ref), (s_src, s_ref)


def kabsch(src: np.ndarray, dst: np.ndarray, allow_reflection: bool = False) -> RigidTransform:
    """Least-squares rigid fit dst ~ R src + t via the cross-covariance SVD."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(2)
    reflect = np.linalg.det(Vt.T @ U.T) < 0
    if reflect and not allow_reflection:
        D[1, 1] = -1.0
        reflect = False
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s, bool(reflect))


def _centered_init(src: np.ndarray, ref: np.ndarray, angle: float, reflect: bool) -> RigidTransform:
    T = RigidTransform.from_angle(angle, reflect=reflect)
    t = ref.mean(axis=0) - T.rotation @ src.mean(axis=0)
    return RigidTransform(T.rotation, t, reflect)


def _correspondences(
    tree: cKDTree, moved: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    dist, idx = tree.query(moved, k=1)
    med = float(np.median(dist))
    keep = dist <= max(CUTOFF_FACTOR * med, 1e-12)
    return idx, dist, keep


def icp_align(
    src: np.ndarray,
    ref: np.ndarray,
    init: Optional[RigidTransform] = None,
    max_iter: int = 100,
    tol: float = 1e-9,
    allow_reflection: bool = False,
) -> Tuple[RigidTransform, IcpReport]:
    """Point-to-point ICP with a 3x-median correspondence cutoff.

    Without ``init`` the centroids are matched and the rotation starts at identity.
    The recorded error never increases: a step that would raise it is rejected.
    """
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if src.shape[0] == 0 or ref.shape[0] == 0:
        raise DataError("ICP needs two nonempty point sets")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    T = init if init is not None else _centered_init(src, ref, 0.0, False)
    tree = cKDTree(ref)
    history: List[float] = []
    prev = T
    iterations = 0
    for it in range(max_iter + 1):
        idx, dist, keep = _correspondences(tree, T.apply(src))
        mse = float(np.mean(dist[keep] ** 2))
        if history and mse > history[-1]:
            T = prev
            break
        history.append(mse)
        if len(history) > 1 and history[-2] - mse <= tol * max(history[-2], 1e-300):
            break
        if it == max_iter:
            break
        prev = T
        T = kabsch(src[keep], ref[idx[keep]], allow_reflection)
        iterations = it + 1
    report = IcpReport(iterations=iterations, final_mean_sq_error=history[-1], history=history)
    log.debug("ICP: %d iterations, mse %.3g", iterations, history[-1])
    return T, report


def expression_score(
    src: np.ndarray, ref: np.ndarray, src_expr: np.ndarray, ref_expr: np.ndarray, T: RigidTransform
) -> float:
    """Mean cosine similarity of expression over matched nearest-neighbor pairs."""
    idx, _, keep = _correspondences(cKDTree(ref), T.apply(src))
    a = l2_normalize(src_expr[keep])
    b = l2_normalize(ref_expr[idx[keep]])
    return float((a * b).sum(axis=1).mean())


def default_angles(n: int = 12) -> List[float]:
    return [2.0 * np.pi * i / n for i in range(n)]


def select_rotation(
    src: np.ndarray,
    ref: np.ndarray,
    src_expr: np.ndarray,
    ref_expr: np.ndarray,
    candidate_angles: Optional[Sequence[float]] = None,
    include_reflection: bool = False,
    max_iter: int = 100,
    tol: float = 1e-9,
) -> Tuple[RigidTransform, IcpReport]:
    """Multi-start ICP; the converged run with the best expression agreement wins,
    ties broken by lower geometric error.
    """
    angles = list(default_angles() if candidate_angles is None else candidate_angles)
    if not angles:
        raise ValueError("empty candidate angle list")
    if src_expr.shape[1] != ref_expr.shape[1]:
        raise DataError("slices do not share a gene panel")
    starts = [(a, False) for a in angles]
    if include_reflection:
        starts += [(a, True) for a in angles]
    results = []
    for angle, reflect in starts:
        T, rep = icp_align(src, ref, _centered_init(src, ref, angle, reflect), max_iter, tol, reflect)
        score = expression_score(src, ref, src_expr, ref_expr, T)
        rep.selected_init_angle = float(np.mod(angle, 2.0 * np.pi))
        rep.expression_score = score
        key = (
            -round(score, SCORE_DECIMALS),
            round(rep.final_mean_sq_error, SCORE_DECIMALS),
            reflect,
            rep.selected_init_angle,
        )
        results.append((key, T, rep))
        log.debug("Rotation start %.1f deg reflect=%s: score %.4f mse %.4g",
                  np.degrees(angle), reflect, score, rep.final_mean_sq_error)
    results.sort(key=lambda r: r[0])
    _, best_T, best_rep = results[0]
    log.info(
        "Rigid pre-alignment: start %.0f deg, angle %.1f deg, expression score %.4f, mse %.4g",
        np.degrees(best_rep.selected_init_angle), np.degrees(best_T.angle),
        best_rep.expression_score, best_rep.final_mean_sq_error,
    )
    return best_T, best_rep
