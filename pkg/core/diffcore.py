"""Small differentiable-compute substrate for the fixed MLP topologies.

Networks are plain stacks of Linear -> LayerNorm -> ReLU hidden layers followed by
a final Linear layer. Parameters live in one flat float64 vector per network; the
layer layout is described by ``LayerShape`` records. Gradients are hand-rolled
reverse mode over that fixed topology, plus a forward-tangent (JVP) pass and its
reverse used for the deformation Jacobian penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DimensionError, NonFiniteError
from core.logger import get_logger

log = get_logger(__name__)

LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerShape:
    rows: int
    cols: int
    has_bias: bool = True
    has_norm: bool = False

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.rows if self.has_bias else 0) + (
            2 * self.rows if self.has_norm else 0
        )

    def to_list(self) -> List:
        return [self.rows, self.cols, self.has_bias, self.has_norm]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dim: int
    num_hidden_layers: int
    output_dim: int
    use_layernorm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError(f"MLP dims must be >= 1: {self}")
        if self.num_hidden_layers < 0:
            raise ValueError("num_hidden_layers must be >= 0")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_shapes(self) -> List[LayerShape]:
        shapes: List[LayerShape] = []
        fan_in = self.input_dim
        for _ in range(self.num_hidden_layers):
            shapes.append(LayerShape(self.hidden_dim, fan_in, True, self.use_layernorm))
            fan_in = self.hidden_dim
        shapes.append(LayerShape(self.output_dim, fan_in, True, False))
        return shapes

    def to_dict(self) -> Dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_hidden_layers": self.num_hidden_layers,
            "output_dim": self.output_dim,
            "use_layernorm": self.use_layernorm,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MlpSpec":
        return cls(**data)


@dataclass
class LayerView:
    W: np.ndarray
    b: Optional[np.ndarray]
    gamma: Optional[np.ndarray]
    beta: Optional[np.ndarray]


def _split(values: np.ndarray, shapes: Sequence[LayerShape]) -> List[LayerView]:
    views: List[LayerView] = []
    off = 0
    for s in shapes:
        W = values[off : off + s.rows * s.cols].reshape(s.rows, s.cols)
        off += s.rows * s.cols
        b = gamma = beta = None
        if s.has_bias:
            b = values[off : off + s.rows]
            off += s.rows
        if s.has_norm:
            gamma = values[off : off + s.rows]
            off += s.rows
            beta = values[off : off + s.rows]
            off += s.rows
        views.append(LayerView(W, b, gamma, beta))
    return views


@dataclass
class ParamVector:
    values: np.ndarray
    shapes: List[LayerShape]
    rng_seed: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        expected = sum(s.size for s in self.shapes)
        if self.values.size != expected:
            raise DimensionError("parameter count", expected, self.values.size)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def layers(self) -> List[LayerView]:
        return _split(self.values, self.shapes)

    def layer(self, i: int) -> LayerView:
        return self.layers()[i]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.shapes), self.rng_seed)

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def matches(self, spec: MlpSpec) -> bool:
        return list(self.shapes) == spec.layer_shapes()


def init_params(
    spec: MlpSpec, seed: int, final_scale: Optional[float] = None
) -> ParamVector:
    """Kaiming-uniform (fan-in) init for ReLU layers.

    ``final_scale`` overrides the last layer with U(-final_scale, final_scale)
    weights and zero bias; 0 gives an all-zero last layer.
    """
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes()
    values = np.zeros(sum(s.size for s in shapes))
    views = _split(values, shapes)
    for i, (s, v) in enumerate(zip(shapes, views)):
        last = i == len(shapes) - 1
        if last and final_scale is not None:
            v.W[...] = rng.uniform(-final_scale, final_scale, size=v.W.shape)
        else:
            gain = 1.0 if last else 2.0
            bound = np.sqrt(3.0 * gain / s.cols)
            v.W[...] = rng.uniform(-bound, bound, size=v.W.shape)
        if v.gamma is not None:
            v.gamma[...] = 1.0
            v.beta[...] = 0.0
    return ParamVector(values, shapes, seed)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != np.shape(gamma)[-1] or np.shape(gamma) != np.shape(beta):
        raise DimensionError("layernorm width", x.shape[-1], (np.shape(gamma), np.shape(beta)))
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + LN_EPS) + beta


def _as_batch(x: np.ndarray, dim: int, what: str) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(what, dim, x.shape)
    return x, single


def _check_params(params: ParamVector, spec: MlpSpec) -> List[LayerView]:
    if not params.matches(spec):
        raise DimensionError(
            "parameter layout", [s.to_list() for s in spec.layer_shapes()],
            [s.to_list() for s in params.shapes],
        )
    return params.layers()


@dataclass
class _LayerCache:
    a_in: np.ndarray
    xhat: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    a_in_dot: Optional[np.ndarray] = None
    c_dot: Optional[np.ndarray] = None
    s_dot: Optional[np.ndarray] = None
    xhat_dot: Optional[np.ndarray] = None


@dataclass
class ForwardCache:
    layers: List[_LayerCache] = field(default_factory=list)
    single: bool = False


def mlp_forward_cached(
    params: ParamVector, spec: MlpSpec, x: np.ndarray
) -> Tuple[np.ndarray, ForwardCache]:
    views = _check_params(params, spec)
    a, single = _as_batch(x, spec.input_dim, "mlp input")
    cache = ForwardCache(single=single)
    last = len(views) - 1
    for i, v in enumerate(views):
        lc = _LayerCache(a_in=a)
        z = a @ v.W.T
        if v.b is not None:
            z = z + v.b
        if i == last:
            a = z
        else:
            if v.gamma is not None:
                c = z - z.mean(axis=1, keepdims=True)
                std = np.sqrt((c * c).mean(axis=1, keepdims=True) + LN_EPS)
                xhat = c / std
                y = v.gamma * xhat + v.beta
                lc.xhat, lc.std = xhat, std
            else:
                y = z
            lc.mask = y > 0
            a = y * lc.mask
        cache.layers.append(lc)
    return (a[0] if single else a), cache


def mlp_forward(params: ParamVector, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward_cached(params, spec, x)
    return out


def mlp_backward(
    params: ParamVector,
    spec: MlpSpec,
    x: np.ndarray,
    upstream_grad: np.ndarray,
    cache: Optional[ForwardCache] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradient of sum(output * upstream_grad).

    Returns (flat parameter gradient aligned with ``params.values``, input gradient).
    """
    views = _check_params(params, spec)
    if cache is None:
        _, cache = mlp_forward_cached(params, spec, x)
    g, _ = _as_batch(upstream_grad, spec.output_dim, "upstream gradient")
    if g.shape[0] != cache.layers[0].a_in.shape[0]:
        raise DimensionError("upstream batch", cache.layers[0].a_in.shape[0], g.shape[0])
    grad = params.zeros_like()
    gviews = _split(grad, params.shapes)
    last = len(views) - 1
    for i in range(last, -1, -1):
        v, gv, lc = views[i], gviews[i], cache.layers[i]
        if i == last:
            gz = g
        else:
            gy = g * lc.mask
            if v.gamma is not None:
                gv.gamma[...] = (gy * lc.xhat).sum(axis=0)
                gv.beta[...] = gy.sum(axis=0)
                gx = gy * v.gamma
                gz = (
                    gx
                    - gx.mean(axis=1, keepdims=True)
                    - lc.xhat * (gx * lc.xhat).mean(axis=1, keepdims=True)
                ) / lc.std
            else:
                gz = gy
        gv.W[...] = gz.T @ lc.a_in
        if gv.b is not None:
            gv.b[...] = gz.sum(axis=0)
        g = gz @ v.W
    grad_x = g[0] if cache.single else g
    return grad, grad_x


def mlp_jvp(
    params: ParamVector, spec: MlpSpec, x: np.ndarray, x_dot: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Forward pass carrying a tangent ``x_dot`` alongside the primal ``x``."""
    views = _check_params(params, spec)
    a, single = _as_batch(x, spec.input_dim, "mlp input")
    a_dot, _ = _as_batch(x_dot, spec.input_dim, "mlp tangent")
    if a_dot.shape != a.shape:
        raise DimensionError("tangent shape", a.shape, a_dot.shape)
    cache = ForwardCache(single=single)
    last = len(views) - 1
    for i, v in enumerate(views):
        lc = _LayerCache(a_in=a, a_in_dot=a_dot)
        z = a @ v.W.T
        if v.b is not None:
            z = z + v.b
        z_dot = a_dot @ v.W.T
        if i == last:
            a, a_dot = z, z_dot
        else:
            if v.gamma is not None:
                c = z - z.mean(axis=1, keepdims=True)
                std = np.sqrt((c * c).mean(axis=1, keepdims=True) + LN_EPS)
                xhat = c / std
                c_dot = z_dot - z_dot.mean(axis=1, keepdims=True)
                s_dot = (xhat * c_dot).mean(axis=1, keepdims=True)
                xhat_dot = (c_dot - xhat * s_dot) / std
                y = v.gamma * xhat + v.beta
                y_dot = v.gamma * xhat_dot
                lc.xhat, lc.std = xhat, std
                lc.c_dot, lc.s_dot, lc.xhat_dot = c_dot, s_dot, xhat_dot
            else:
                y, y_dot = z, z_dot
            lc.mask = y > 0
            a = y * lc.mask
            a_dot = y_dot * lc.mask
        cache.layers.append(lc)
    if single:
        return a[0], a_dot[0], cache
    return a, a_dot, cache


def mlp_jvp_backward(
    params: ParamVector,
    spec: MlpSpec,
    cache: ForwardCache,
    g_out: Optional[np.ndarray],
    g_out_dot: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse pass through ``mlp_jvp`` for the scalar
    sum(out * g_out) + sum(out_dot * g_out_dot).

    Returns (flat parameter gradient, gradient wrt x, gradient wrt x_dot).
    """
    views = _check_params(params, spec)
    gt, _ = _as_batch(g_out_dot, spec.output_dim, "tangent upstream")
    g = np.zeros_like(gt) if g_out is None else _as_batch(g_out, spec.output_dim, "upstream")[0]
    grad = params.zeros_like()
    gviews = _split(grad, params.shapes)
    last = len(views) - 1
    for i in range(last, -1, -1):
        v, gv, lc = views[i], gviews[i], cache.layers[i]
        if lc.a_in_dot is None:
            raise ValueError("cache was not produced by mlp_jvp")
        if i == last:
            gz, gz_dot = g, gt
        else:
            gy = g * lc.mask
            gy_dot = gt * lc.mask
            if v.gamma is not None:
                xhat, std = lc.xhat, lc.std
                c_dot, s_dot, xhat_dot = lc.c_dot, lc.s_dot, lc.xhat_dot
                gv.gamma[...] = (gy * xhat + gy_dot * xhat_dot).sum(axis=0)
                gv.beta[...] = gy.sum(axis=0)
                gx = gy * v.gamma
                gtx = gy_dot * v.gamma
                m_gx = (gx * xhat).mean(axis=1, keepdims=True)
                m_gt = (gtx * xhat).mean(axis=1, keepdims=True)
                m_gtc = (gtx * c_dot).mean(axis=1, keepdims=True)
                g_c = (gx - xhat * m_gx) / std + (
                    -xhat * m_gtc - gtx * s_dot - c_dot * m_gt + 3.0 * xhat * s_dot * m_gt
                ) / (std * std)
                g_c_dot = (gtx - xhat * m_gt) / std
                gz = g_c - g_c.mean(axis=1, keepdims=True)
                gz_dot = g_c_dot - g_c_dot.mean(axis=1, keepdims=True)
            else:
                gz, gz_dot = gy, gy_dot
        gv.W[...] = gz.T @ lc.a_in + gz_dot.T @ lc.a_in_dot
        if gv.b is not None:
            gv.b[...] = gz.sum(axis=0)
        g = gz @ v.W
        gt = gz_dot @ v.W
    if cache.single:
        return grad, g[0], gt[0]
    return grad, g, gt


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, lr: float = 1e-3) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), lr=lr)


def adam_step(state: AdamState, params: ParamVector, grads: np.ndarray) -> ParamVector:
    grads = np.asarray(grads, dtype=np.float64).reshape(-1)
    if grads.size != params.size or state.m.size != params.size:
        raise DimensionError("adam gradient length", params.size, grads.size)
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteError(
            "non-finite gradient rejected",
            {"count": int(bad.size), "first_index": int(bad[0]), "step": state.step_count},
        )
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step_count)
    v_hat = state.v / (1.0 - state.beta2**state.step_count)
    values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamVector(values, list(params.shapes), params.rng_seed)


@dataclass
class PlateauScheduler:
    lr: float = 1e-3
    patience: int = 20
    factor: float = 0.5
    min_lr: float = 1e-5
    threshold: float = 1e-4
    best_loss: float = float("inf")
    epochs_since_improve: int = 0
    num_decays: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        self.lr = max(self.lr, self.min_lr)


def plateau_update(sched: PlateauScheduler, epoch_loss: float) -> float:
    if not np.isfinite(epoch_loss):
        raise NonFiniteError("plateau scheduler received a non-finite loss", {"loss": epoch_loss})
    if epoch_loss < sched.best_loss * (1.0 - sched.threshold) or sched.best_loss == float("inf"):
        sched.best_loss = epoch_loss
        sched.epochs_since_improve = 0
        return sched.lr
    sched.epochs_since_improve += 1
    if sched.epochs_since_improve >= sched.patience:
        new_lr = max(sched.lr * sched.factor, sched.min_lr)
        if new_lr < sched.lr:
            sched.num_decays += 1
            log.info("Plateau: lr %.3g -> %.3g", sched.lr, new_lr)
        sched.lr = new_lr
        sched.epochs_since_improve = 0
    return sched.lr
