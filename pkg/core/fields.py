from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import diffcore
from core.diffcore import ForwardCache, MlpSpec, ParamVector
from core.encoding import EncodingSpec, encode, encode_backward, encode_jvp
from core.logger import get_logger

log = get_logger(__name__)

EMBED_DIM = 64
SIGMA_FLOOR = 1e-8
COMPRESSION_WEIGHT = 5.0
EXPANSION_WEIGHT = 1.0


@dataclass
class ExprField:
    """Coordinate -> embedding network (windowed encoding + LayerNorm MLP)."""

    params: ParamVector
    spec: MlpSpec
    encoding: EncodingSpec

    @classmethod
    def build(
        cls,
        encoding: EncodingSpec,
        seed: int,
        hidden: int = 256,
        num_layers: int = 4,
        embed_dim: int = EMBED_DIM,
    ) -> "ExprField":
        spec = MlpSpec(encoding.output_dim, hidden, num_layers - 1, embed_dim, True)
        return cls(diffcore.init_params(spec, seed), spec, encoding)

    def forward(self, x: np.ndarray, alpha: float) -> Tuple[np.ndarray, ForwardCache]:
        enc = encode(x, self.encoding, alpha)
        return diffcore.mlp_forward_cached(self.params, self.spec, enc)

    def backward(
        self, x: np.ndarray, alpha: float, cache: ForwardCache, g_embed: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (parameter gradient, coordinate gradient)."""
        grad, g_enc = diffcore.mlp_backward(self.params, self.spec, None, g_embed, cache)
        return grad, encode_backward(x, self.encoding, alpha, g_enc)

    def copy(self) -> "ExprField":
        return ExprField(self.params.copy(), self.spec, self.encoding)


@dataclass
class ExprDecoder:
    params: ParamVector
    spec: MlpSpec

    @classmethod
    def build(
        cls, n_genes: int, seed: int, embed_dim: int = EMBED_DIM, hidden: int = 256, num_hidden: int = 2
    ) -> "ExprDecoder":
        spec = MlpSpec(embed_dim, hidden, num_hidden, n_genes, True)
        return cls(diffcore.init_params(spec, seed), spec)

    @property
    def n_genes(self) -> int:
        return self.spec.output_dim

    def copy(self) -> "ExprDecoder":
        return ExprDecoder(self.params.copy(), self.spec)


@dataclass
class DeformCache:
    x: np.ndarray
    alpha: float
    trunk: ForwardCache
    head: ForwardCache


@dataclass
class DeformNet:
    """Residual coordinate map x -> x + head(trunk(encode(x)))."""

    trunk_params: ParamVector
    trunk_spec: MlpSpec
    head_params: ParamVector
    head_spec: MlpSpec
    encoding: EncodingSpec

    @classmethod
    def build(
        cls,
        encoding: EncodingSpec,
        seed: int,
        hidden: int = 128,
        trunk_layers: int = 6,
        head_hidden: int = 64,
        head_init_scale: float = 1e-4,
    ) -> "DeformNet":
        trunk_spec = MlpSpec(encoding.output_dim, hidden, trunk_layers - 1, hidden, True)
        head_spec = MlpSpec(hidden, head_hidden, 1, 2, True)
        return cls(
            diffcore.init_params(trunk_spec, seed),
            trunk_spec,
            diffcore.init_params(head_spec, seed + 1, final_scale=head_init_scale),
            head_spec,
            encoding,
        )

    def forward(self, x: np.ndarray, alpha: float) -> Tuple[np.ndarray, DeformCache]:
        x = np.asarray(x, dtype=np.float64)
        enc = encode(x, self.encoding, alpha)
        feat, tc = diffcore.mlp_forward_cached(self.trunk_params, self.trunk_spec, enc)
        delta, hc = diffcore.mlp_forward_cached(self.head_params, self.head_spec, feat)
        return x + delta, DeformCache(x, alpha, tc, hc)

    def backward(
        self, cache: DeformCache, g_out: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Parameter gradients (trunk, head) of sum(deform(x) * g_out).

        Coordinates are data, so no input gradient is returned.
        """
        g_head, g_feat = diffcore.mlp_backward(
            self.head_params, self.head_spec, None, g_out, cache.head
        )
        g_trunk, _ = diffcore.mlp_backward(
            self.trunk_params, self.trunk_spec, None, g_feat, cache.trunk
        )
        return g_trunk, g_head

    def copy(self) -> "DeformNet":
        return DeformNet(
            self.trunk_params.copy(), self.trunk_spec,
            self.head_params.copy(), self.head_spec, self.encoding,
        )


@dataclass
class JacobianSample:
    point: np.ndarray
    J: np.ndarray
    singular_values: Tuple[float, float]


@dataclass
class JacobianCache:
    x: np.ndarray
    alpha: float
    columns: List[Tuple[ForwardCache, ForwardCache]] = field(default_factory=list)


def field_embed(fld: ExprField, x: np.ndarray, alpha: float) -> np.ndarray:
    emb, _ = fld.forward(x, alpha)
    return emb


def decode_expression(dec: ExprDecoder, e: np.ndarray) -> np.ndarray:
    return diffcore.mlp_forward(dec.params, dec.spec, e)


def deform(net: DeformNet, x: np.ndarray, alpha: float) -> np.ndarray:
    out, _ = net.forward(x, alpha)
    return out


def jacobian_batch(
    net: DeformNet, x: np.ndarray, alpha: float
) -> Tuple[np.ndarray, JacobianCache]:
    """Exact 2x2 Jacobians via one forward-tangent pass per input axis."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    J = np.zeros((n, 2, 2))
    cache = JacobianCache(x, alpha)
    for k in range(2):
        direction = np.zeros((n, 2))
        direction[:, k] = 1.0
        enc, enc_dot = encode_jvp(x, net.encoding, alpha, direction)
        feat, feat_dot, tc = diffcore.mlp_jvp(net.trunk_params, net.trunk_spec, enc, enc_dot)
        _, delta_dot, hc = diffcore.mlp_jvp(net.head_params, net.head_spec, feat, feat_dot)
        J[:, :, k] = direction + delta_dot
        cache.columns.append((tc, hc))
    return J, cache


def jacobian_batch_backward(
    net: DeformNet, cache: JacobianCache, g_J: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Parameter gradients (trunk, head) of sum(J * g_J)."""
    g_trunk = net.trunk_params.zeros_like()
    g_head = net.head_params.zeros_like()
    for k, (tc, hc) in enumerate(cache.columns):
        gh, g_feat, g_feat_dot = diffcore.mlp_jvp_backward(
            net.head_params, net.head_spec, hc, None, g_J[:, :, k]
        )
        gt, _, _ = diffcore.mlp_jvp_backward(
            net.trunk_params, net.trunk_spec, tc, g_feat, g_feat_dot
        )
        g_trunk += gt
        g_head += gh
    return g_trunk, g_head


def jacobian_at(net: DeformNet, x: np.ndarray, alpha: float) -> np.ndarray:
    J, _ = jacobian_batch(net, np.asarray(x, dtype=np.float64).reshape(1, 2), alpha)
    return J[0]


def svd2x2(J: np.ndarray) -> Tuple[float, float]:
    """Closed-form singular values from the eigenvalues of J^T J."""
    s = svd2x2_batch(np.asarray(J, dtype=np.float64).reshape(1, 2, 2))
    return float(s[0, 0]), float(s[0, 1])


def svd2x2_batch(J: np.ndarray) -> np.ndarray:
    t = (J * J).sum(axis=(1, 2))
    d = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    r = np.sqrt(np.maximum(t * t - 4.0 * d * d, 0.0))
    s1 = np.sqrt(np.maximum((t + r) / 2.0, 0.0))
    # s2 from the determinant avoids cancellation in (t - r)
    s2 = np.where(s1 > 0, np.abs(d) / np.where(s1 > 0, s1, 1.0), 0.0)
    s2 = np.minimum(s2, s1)
    return np.stack([s1, s2], axis=1)


def make_samples(points: np.ndarray, J: np.ndarray) -> List[JacobianSample]:
    sv = svd2x2_batch(J)
    return [
        JacobianSample(np.asarray(p), j, (float(s[0]), float(s[1])))
        for p, j, s in zip(points, J, sv)
    ]


def _penalty_terms(sv: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    clamped = sv < SIGMA_FLOOR
    logs = np.log(np.maximum(sv, SIGMA_FLOOR))
    w = np.where(logs < 0, COMPRESSION_WEIGHT, EXPANSION_WEIGHT)
    return w * logs * logs, w, clamped


def jacobian_loss(samples: Sequence[JacobianSample]) -> float:
    """Mean over samples of sum_k w_k (log s_k)^2; compression weighted 5x."""
    if not samples:
        return 0.0
    sv = np.array([s.singular_values for s in samples], dtype=np.float64)
    terms, _, clamped = _penalty_terms(sv)
    if clamped.any():
        log.warning("Jacobian penalty: %d singular values clamped at %.0e", int(clamped.sum()), SIGMA_FLOOR)
    return float(terms.sum(axis=1).mean())


def jacobian_penalty(J: np.ndarray) -> Tuple[float, np.ndarray, int]:
    """Penalty value, its gradient wrt each J, and the number of clamped singular values.

    Singular values come from svd2x2_batch. The gradient differentiates
    s1^2 + s2^2 = |J|_F^2 and s1 * s2 = |det J| rather than using singular vectors.
    """
    n = J.shape[0]
    S = svd2x2_batch(J)
    terms, w, clamped = _penalty_terms(S)
    loss = float(terms.sum(axis=1).mean())
    logs = np.log(np.maximum(S, SIGMA_FLOOR))
    dS = np.where(clamped, 0.0, 2.0 * w * logs / np.maximum(S, SIGMA_FLOOR)) / n
    s1, s2 = S[:, 0], S[:, 1]
    f1, f2 = dS[:, 0], dS[:, 1]
    gap = s1 * s1 - s2 * s2
    split = gap > 1e-12 * np.maximum(s1 * s1, SIGMA_FLOOR)
    safe_gap = np.where(split, gap, 1.0)
    # repeated singular value: both slopes collapse onto J / s
    s_mid = np.maximum(0.5 * (s1 + s2), SIGMA_FLOOR)
    f_mid = 0.5 * (f1 + f2)
    a = np.where(split, (f1 * s1 - f2 * s2) / safe_gap, f_mid / (2.0 * s_mid))
    b = np.where(split, (f2 * s1 - f1 * s2) / safe_gap, f_mid / (2.0 * s_mid))
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    cof = np.empty_like(J)
    cof[:, 0, 0], cof[:, 0, 1] = J[:, 1, 1], -J[:, 1, 0]
    cof[:, 1, 0], cof[:, 1, 1] = -J[:, 0, 1], J[:, 0, 0]
    g_J = a[:, None, None] * J + (b * np.sign(det))[:, None, None] * cof
    return loss, g_J, int(clamped.sum())


def fold_fraction(J: np.ndarray) -> float:
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return float(np.mean(det <= 0)) if det.size else 0.0


def network_state(
    field_ref: ExprField,
    decoder: ExprDecoder,
    deform_net: DeformNet,
    field_src: Optional[ExprField] = None,
) -> Dict[str, Tuple[ParamVector, MlpSpec]]:
    state = {
        "field_ref": (field_ref.params, field_ref.spec),
        "decoder": (decoder.params, decoder.spec),
        "deform_trunk": (deform_net.trunk_params, deform_net.trunk_spec),
        "deform_head": (deform_net.head_params, deform_net.head_spec),
    }
    if field_src is not None:
        state["field_src"] = (field_src.params, field_src.spec)
    return state
