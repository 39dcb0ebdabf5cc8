from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from core.errors import ConfigError
from core.logger import get_logger
from core.rigid import RigidTransform
from core.slices import Slice

log = get_logger(__name__)

WARP_KINDS = ("none", "affine", "sinusoidal", "composite")
AFFINE_CENTER = np.array([0.5, 0.5])
MARKER_FOLD = 6.0
BASE_RATE = 2.0
GRADIENT_MIN_FREQ = 0.5
GRADIENT_MAX_FREQ = 1.5


@dataclass
class WarpSpec:
    kind: str = "sinusoidal"
    amplitude: float = 0.1
    frequency: float = 2.0
    # row-major 2x2 about the unit-square center
    affine: List[float] = field(default_factory=lambda: [1.0, 0.0, 0.0, 1.0])

    def validate(self) -> "WarpSpec":
        if self.kind not in WARP_KINDS:
            raise ConfigError(f"warp kind must be one of {WARP_KINDS}, got {self.kind!r}")
        if self.kind in ("sinusoidal", "composite"):
            if not (np.isfinite(self.amplitude) and self.amplitude >= 0):
                raise ConfigError("warp amplitude must be finite and >= 0")
            if not (np.isfinite(self.frequency) and self.frequency > 0):
                raise ConfigError("warp frequency must be > 0")
        if self.kind in ("affine", "composite"):
            if len(self.affine) != 4 or not np.all(np.isfinite(self.affine)):
                raise ConfigError("affine warp needs 4 finite matrix entries")
            if np.linalg.det(np.reshape(self.affine, (2, 2))) <= 0:
                raise ConfigError("affine warp must preserve orientation (det > 0)")
        return self


@dataclass
class SyntheticSpec:
    n_spots: int = 800
    n_genes: int = 200
    n_domains: int = 4
    warp: WarpSpec = field(default_factory=WarpSpec)
    rigid_angle_deg: float = 30.0
    rigid_translation: List[float] = field(default_factory=lambda: [0.0, 0.0])
    dropout: float = 0.1
    noise_sigma: float = 0.3
    batch_sigma: float = 0.2
    gradient_strength: float = 0.5
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.n_spots < 2 or self.n_genes < 1 or self.n_domains < 1:
            raise ConfigError("n_spots >= 2, n_genes >= 1 and n_domains >= 1 are required")
        if self.n_domains > self.n_spots:
            raise ConfigError("more domains than spots")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.noise_sigma < 0 or self.batch_sigma < 0:
            raise ConfigError("noise levels must be >= 0")
        if not (np.isfinite(self.gradient_strength) and self.gradient_strength >= 0):
            raise ConfigError("gradient_strength must be finite and >= 0")
        if len(self.rigid_translation) != 2:
            raise ConfigError("rigid_translation needs two entries")
        self.warp.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        warp = data.pop("warp", {}) or {}
        if isinstance(warp, str):
            warp = {"kind": warp}
        unknown = set(warp) - set(WarpSpec.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown warp keys: {sorted(unknown)}")
        try:
            return cls(warp=WarpSpec(**warp), **data).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class SyntheticPair:
    src: Slice
    ref: Slice
    correspondence: np.ndarray
    warped: np.ndarray
    rigid: RigidTransform

    def ground_truth(self) -> pd.DataFrame:
        """Source id, its reference partner, and the partner's coordinates."""
        ref_idx = self.correspondence
        return pd.DataFrame({
            "src_id": self.src.ids,
            "ref_id": [self.ref.ids[i] for i in ref_idx],
            "ref_x": self.ref.coords[ref_idx, 0],
            "ref_y": self.ref.coords[ref_idx, 1],
        })


def sinusoidal_displacement(points: np.ndarray, amplitude: float, frequency: float) -> np.ndarray:
    """d = A (sin 2 pi f y, sin 2 pi f x) / sqrt 2, so |d| <= A."""
    arg = 2.0 * np.pi * frequency * points
    return amplitude / np.sqrt(2.0) * np.column_stack([np.sin(arg[:, 1]), np.sin(arg[:, 0])])


def apply_warp(points: np.ndarray, warp: WarpSpec) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    warp.validate()
    out = points
    if warp.kind in ("affine", "composite"):
        A = np.reshape(np.asarray(warp.affine, dtype=np.float64), (2, 2))
        out = (out - AFFINE_CENTER) @ A.T + AFFINE_CENTER
    if warp.kind in ("sinusoidal", "composite"):
        out = out + sinusoidal_displacement(out, warp.amplitude, warp.frequency)
    return out.copy()


def gradient_modulation(
    rng: np.random.Generator, points: np.ndarray, n_genes: int, strength: float
) -> np.ndarray:
    """Per-gene smooth spatial trend exp(strength * sin(2 pi <w_g, x> + phase_g)).

    Directions are uniform; wave numbers lie in [GRADIENT_MIN_FREQ, GRADIENT_MAX_FREQ]
    cycles per unit, so every gene varies slowly across the slice.
    """
    if strength <= 0:
        return np.ones((points.shape[0], n_genes))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n_genes)
    freq = rng.uniform(GRADIENT_MIN_FREQ, GRADIENT_MAX_FREQ, size=n_genes)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_genes)
    w = freq[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    return np.exp(strength * np.sin(2.0 * np.pi * points @ w.T + phase))


def _expression(
    rng: np.random.Generator, base: np.ndarray, spec: SyntheticSpec, batch: Optional[np.ndarray]
) -> np.ndarray:
    rates = base
    if spec.noise_sigma > 0:
        rates = rates * rng.lognormal(0.0, spec.noise_sigma, size=rates.shape)
    if batch is not None:
        rates = rates * batch[None, :]
    if spec.dropout > 0:
        rates = rates * (rng.random(rates.shape) >= spec.dropout)
    return rates


def generate_synthetic(spec: SyntheticSpec) -> SyntheticPair:
    """Reference on the unit square with Voronoi domains; source = rigid(warp(reference)).

    Source spot i corresponds to reference spot i.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ref_xy = rng.random((spec.n_spots, 2))
    seeds = rng.random((spec.n_domains, 2))
    _, domains = cKDTree(seeds).query(ref_xy, k=1)
    domains = np.asarray(domains, dtype=np.int64).reshape(-1)

    programs = np.full((spec.n_domains, spec.n_genes), BASE_RATE)
    programs *= rng.lognormal(0.0, 0.5, size=(1, spec.n_genes))
    markers = rng.integers(0, spec.n_domains, size=spec.n_genes)
    programs[markers, np.arange(spec.n_genes)] *= MARKER_FOLD

    # trends at reference positions; partners share them
    base = programs[domains] * gradient_modulation(rng, ref_xy, spec.n_genes, spec.gradient_strength)
    ref_expr = _expression(rng, base, spec, None)
    batch = rng.lognormal(0.0, spec.batch_sigma, size=spec.n_genes) if spec.batch_sigma > 0 else None
    src_expr = _expression(rng, base, spec, batch)

    warped = apply_warp(ref_xy, spec.warp)
    rigid = RigidTransform.from_angle(np.radians(spec.rigid_angle_deg), spec.rigid_translation)
    src_xy = rigid.apply(warped)

    genes = [f"g{j:04d}" for j in range(spec.n_genes)]
    labels = np.array([f"D{d}" for d in domains])
    ref = Slice([f"r{i:05d}" for i in range(spec.n_spots)], ref_xy, ref_expr, genes, labels)
    src = Slice([f"s{i:05d}" for i in range(spec.n_spots)], src_xy, src_expr, genes, labels.copy())
    log.info(
        "Synthetic pair: %d spots, %d genes, %d domains, warp=%s, rigid %.1f deg",
        spec.n_spots, spec.n_genes, spec.n_domains, spec.warp.kind, spec.rigid_angle_deg,
    )
    return SyntheticPair(src, ref, np.arange(spec.n_spots), warped, rigid)
