from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from core.errors import DimensionError, NonFiniteError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class EncodingSpec:
    num_freqs: int = 8
    max_log_freq: float = 6.0
    includes_identity: bool = True

    def __post_init__(self):
        if self.num_freqs < 1:
            raise ValueError("num_freqs must be >= 1")
        if not self.includes_identity:
            raise ValueError("the encoding always carries the raw coordinates")

    @property
    def output_dim(self) -> int:
        return 2 + 4 * self.num_freqs

    def frequencies(self) -> np.ndarray:
        L = self.num_freqs
        if L == 1:
            return np.ones(1)
        k = np.arange(L, dtype=np.float64)
        return 2.0 ** (k * self.max_log_freq / (L - 1))

    def to_dict(self) -> Dict:
        return {"num_freqs": self.num_freqs, "max_log_freq": self.max_log_freq}

    @classmethod
    def from_dict(cls, data: Dict) -> "EncodingSpec":
        return cls(int(data["num_freqs"]), float(data["max_log_freq"]))


def window_weights(alpha: float, num_freqs: int) -> np.ndarray:
    """Coarse-to-fine window w_k(alpha) = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2."""
    k = np.arange(num_freqs, dtype=np.float64)
    t = np.clip(alpha - k, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def _prepare(x: np.ndarray, spec: EncodingSpec, alpha: float) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != 2:
        raise DimensionError("coordinates", "(N, 2)", x.shape)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite coordinate passed to encode", {"count": int((~np.isfinite(x)).sum())})
    if not 0.0 <= alpha <= spec.num_freqs:
        raise ValueError(f"alpha must lie in [0, {spec.num_freqs}], got {alpha}")
    return x, single


def encode(x: np.ndarray, spec: EncodingSpec, alpha: float) -> np.ndarray:
    """Windowed Fourier features.

    Layout per row: x0, x1, then for each frequency k:
    w_k sin(2 pi s_k x0), w_k sin(2 pi s_k x1), w_k cos(2 pi s_k x0), w_k cos(2 pi s_k x1).
    """
    x, single = _prepare(x, spec, alpha)
    w = window_weights(alpha, spec.num_freqs)
    arg = TWO_PI * spec.frequencies()[None, :, None] * x[:, None, :]  # (N, L, 2)
    sin = w[None, :, None] * np.sin(arg)
    cos = w[None, :, None] * np.cos(arg)
    bands = np.concatenate([sin, cos], axis=2).reshape(x.shape[0], -1)
    out = np.concatenate([x, bands], axis=1)
    return out[0] if single else out


def encode_jvp(
    x: np.ndarray, spec: EncodingSpec, alpha: float, x_dot: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Encoding together with its directional derivative along ``x_dot``."""
    x, single = _prepare(x, spec, alpha)
    x_dot = np.broadcast_to(np.asarray(x_dot, dtype=np.float64), x.shape)
    w = window_weights(alpha, spec.num_freqs)
    freq = TWO_PI * spec.frequencies()
    arg = freq[None, :, None] * x[:, None, :]
    s, c = np.sin(arg), np.cos(arg)
    scale = w[None, :, None] * freq[None, :, None] * x_dot[:, None, :]
    bands = np.concatenate([w[None, :, None] * s, w[None, :, None] * c], axis=2)
    bands_dot = np.concatenate([scale * c, -scale * s], axis=2)
    n = x.shape[0]
    out = np.concatenate([x, bands.reshape(n, -1)], axis=1)
    out_dot = np.concatenate([x_dot, bands_dot.reshape(n, -1)], axis=1)
    if single:
        return out[0], out_dot[0]
    return out, out_dot


def encode_backward(
    x: np.ndarray, spec: EncodingSpec, alpha: float, g_enc: np.ndarray
) -> np.ndarray:
    """Gradient wrt the coordinates of sum(encode(x) * g_enc)."""
    x, single = _prepare(x, spec, alpha)
    g_enc = np.asarray(g_enc, dtype=np.float64).reshape(x.shape[0], spec.output_dim)
    L = spec.num_freqs
    w = window_weights(alpha, L)
    freq = TWO_PI * spec.frequencies()
    arg = freq[None, :, None] * x[:, None, :]
    bands = g_enc[:, 2:].reshape(x.shape[0], L, 4)
    g_sin, g_cos = bands[:, :, :2], bands[:, :, 2:]
    coef = w[None, :, None] * freq[None, :, None]
    gx = g_enc[:, :2] + (coef * (g_sin * np.cos(arg) - g_cos * np.sin(arg))).sum(axis=1)
    return gx[0] if single else gx


def alpha_schedule(epoch: int, total_epochs: int, num_freqs: int) -> float:
    """Linear window opening over the first third of ``total_epochs``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    ramp = total_epochs / 3.0
    return float(np.clip(num_freqs * min(1.0, epoch / ramp), 0.0, num_freqs))
