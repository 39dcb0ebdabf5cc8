"""Built-in verification suites: finite-difference gradient checks and metric oracles."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from core import diffcore
from core.diffcore import ForwardCache, ParamVector
from core.encoding import EncodingSpec
from core.fields import (
    DeformNet,
    ExprDecoder,
    ExprField,
    JacobianSample,
    jacobian_at,
    jacobian_batch,
    jacobian_batch_backward,
    jacobian_loss,
    jacobian_penalty,
    svd2x2,
)
from core.logger import get_logger
from core.matching import SpatialIndex
from core.metrics import ari, chamfer_distance, nmi, nn_accuracy, ot_accuracy

log = get_logger(__name__)

FD_STEP = 1e-5
GRAD_REL_TOL = 1e-4
GRAD_FLOOR = 1e-5
JAC_ABS_TOL = 1e-5
COORDS_PER_NET = 24


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float = 0.0
    checked: int = 0
    detail: str = ""


@dataclass
class SelftestReport:
    suites: List[SuiteResult] = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "runtime_s": round(self.runtime_s, 3),
            "suites": [s.__dict__ for s in self.suites],
        }


def _masks(cache: ForwardCache) -> List[np.ndarray]:
    return [lc.mask for lc in cache.layers if lc.mask is not None]


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), GRAD_FLOOR)


def check_param_gradient(
    params: ParamVector,
    evaluate: Callable[[ParamVector], Tuple[float, List[np.ndarray]]],
    analytic: np.ndarray,
    rng: np.random.Generator,
    n_coords: int = COORDS_PER_NET,
) -> Tuple[float, int]:
    """Central differences on sampled coordinates; kinks of the ReLU masks are skipped.

    ``evaluate`` returns the scalar and the activation masks it saw.
    """
    _, base_masks = evaluate(params)
    worst, checked = 0.0, 0
    for i in rng.choice(params.size, size=min(n_coords, params.size), replace=False):
        plus, minus = params.copy(), params.copy()
        plus.values[i] += FD_STEP
        minus.values[i] -= FD_STEP
        f_plus, m_plus = evaluate(plus)
        f_minus, m_minus = evaluate(minus)
        if not (_same_masks(base_masks, m_plus) and _same_masks(base_masks, m_minus)):
            continue
        numeric = (f_plus - f_minus) / (2.0 * FD_STEP)
        worst = max(worst, _rel_err(float(analytic[i]), numeric))
        checked += 1
    return worst, checked


def _field_case(seed: int, rng: np.random.Generator) -> Tuple[float, int]:
    enc = EncodingSpec(4, 3.0)
    fld = ExprField.build(enc, seed, hidden=16, num_layers=3, embed_dim=8)
    x = rng.uniform(-1, 1, size=(6, 2))
    alpha = 3.5
    U = rng.normal(size=(6, 8))
    emb, cache = fld.forward(x, alpha)
    grad, _ = fld.backward(x, alpha, cache, U)

    def evaluate(p: ParamVector):
        out, c = ExprField(p, fld.spec, enc).forward(x, alpha)
        return float((out * U).sum()), _masks(c)

    return check_param_gradient(fld.params, evaluate, grad, rng)


def _decoder_case(seed: int, rng: np.random.Generator) -> Tuple[float, int]:
    dec = ExprDecoder.build(5, seed, embed_dim=8, hidden=16, num_hidden=2)
    e = rng.normal(size=(6, 8))
    U = rng.normal(size=(6, 5))
    grad, _ = diffcore.mlp_backward(dec.params, dec.spec, e, U)

    def evaluate(p: ParamVector):
        out, c = diffcore.mlp_forward_cached(p, dec.spec, e)
        return float((out * U).sum()), _masks(c)

    return check_param_gradient(dec.params, evaluate, grad, rng)


def _deform_cases(seed: int, rng: np.random.Generator) -> List[Tuple[str, float, int]]:
    enc = EncodingSpec(4, 3.0)
    net = DeformNet.build(enc, seed, hidden=16, trunk_layers=3, head_hidden=8, head_init_scale=0.5)
    x = rng.uniform(-1, 1, size=(5, 2))
    alpha = 4.0
    U = rng.normal(size=(5, 2))
    _, cache = net.forward(x, alpha)
    g_trunk, g_head = net.backward(cache, U)

    def with_trunk(p):
        return DeformNet(p, net.trunk_spec, net.head_params, net.head_spec, enc)

    def with_head(p):
        return DeformNet(net.trunk_params, net.trunk_spec, p, net.head_spec, enc)

    def out_eval(build):
        def evaluate(p):
            out, c = build(p).forward(x, alpha)
            return float((out * U).sum()), _masks(c.trunk) + _masks(c.head)
        return evaluate

    J, jcache = jacobian_batch(net, x, alpha)
    _, g_J, _ = jacobian_penalty(J)
    jt, jh = jacobian_batch_backward(net, jcache, g_J)

    def jac_eval(build):
        def evaluate(p):
            n = build(p)
            Jp, jc = jacobian_batch(n, x, alpha)
            masks = [m for tc, hc in jc.columns for m in _masks(tc) + _masks(hc)]
            return jacobian_penalty(Jp)[0], masks
        return evaluate

    return [
        ("deform_trunk", *check_param_gradient(net.trunk_params, out_eval(with_trunk), g_trunk, rng)),
        ("deform_head", *check_param_gradient(net.head_params, out_eval(with_head), g_head, rng)),
        ("jacobian_trunk", *check_param_gradient(net.trunk_params, jac_eval(with_trunk), jt, rng)),
        ("jacobian_head", *check_param_gradient(net.head_params, jac_eval(with_head), jh, rng)),
    ]


def _coordinate_case(seed: int, rng: np.random.Generator) -> Tuple[float, int]:
    """Field gradient wrt its input coordinates (the path into the deformation)."""
    enc = EncodingSpec(4, 3.0)
    fld = ExprField.build(enc, seed, hidden=16, num_layers=3, embed_dim=8)
    x = rng.uniform(-1, 1, size=(4, 2))
    U = rng.normal(size=(4, 8))
    _, cache = fld.forward(x, 4.0)
    _, g_x = fld.backward(x, 4.0, cache, U)
    worst, checked = 0.0, 0
    for r, c in itertools.product(range(x.shape[0]), range(2)):
        xp, xm = x.copy(), x.copy()
        xp[r, c] += FD_STEP
        xm[r, c] -= FD_STEP
        op, cp = fld.forward(xp, 4.0)
        om, cm = fld.forward(xm, 4.0)
        if not (_same_masks(_masks(cache), _masks(cp)) and _same_masks(_masks(cache), _masks(cm))):
            continue
        numeric = float(((op - om) * U).sum()) / (2.0 * FD_STEP)
        worst = max(worst, _rel_err(float(g_x[r, c]), numeric))
        checked += 1
    return worst, checked


def gradient_suite(n_seeds: int = 10) -> SuiteResult:
    worst, checked, worst_name = 0.0, 0, ""
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        cases = [("field", *_field_case(seed, rng)), ("decoder", *_decoder_case(seed, rng)),
                 ("coordinates", *_coordinate_case(seed, rng))] + _deform_cases(seed, rng)
        for name, err, n in cases:
            checked += n
            if err >= worst:
                worst, worst_name = err, f"{name} (seed {seed})"
    passed = worst < GRAD_REL_TOL and checked > 0
    return SuiteResult("gradients", passed, worst, checked, f"worst: {worst_name}")


def jacobian_fd_suite(n_seeds: int = 10) -> SuiteResult:
    enc = EncodingSpec(6, 4.0)
    worst, checked = 0.0, 0
    for seed in range(n_seeds):
        rng = np.random.default_rng(2000 + seed)
        net = DeformNet.build(enc, seed, hidden=16, trunk_layers=3, head_hidden=8, head_init_scale=0.3)
        for x in rng.uniform(-1, 1, size=(4, 2)):
            J = jacobian_at(net, x, 6.0)
            num = np.zeros((2, 2))
            for k in range(2):
                d = np.zeros(2)
                d[k] = FD_STEP
                yp, _ = net.forward(x + d, 6.0)
                ym, _ = net.forward(x - d, 6.0)
                num[:, k] = (yp - ym).reshape(2) / (2.0 * FD_STEP)
            worst = max(worst, float(np.abs(J - num).max()))
            checked += 1
    return SuiteResult("jacobian_at", worst < JAC_ABS_TOL, worst, checked)


def closed_form_suite() -> SuiteResult:
    def loss_of(J: np.ndarray) -> float:
        return jacobian_loss([JacobianSample(np.zeros(2), J, svd2x2(J))])

    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    cases = [
        (0.5 * np.eye(2), 4.804530, 1e-5),
        (2.0 * np.eye(2), 0.960906, 1e-5),
        (np.eye(2), 0.0, 1e-10),
        (rot, 0.0, 1e-10),
    ]
    worst = max(abs(loss_of(J) - want) / tol for J, want, tol in cases)
    return SuiteResult("jacobian_closed_form", worst <= 1.0, worst, len(cases))


def identity_start_suite() -> SuiteResult:
    net = DeformNet.build(EncodingSpec(), seed=0)
    g = np.linspace(0.0, 1.0, 41)
    grid = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    out, _ = net.forward(grid, 0.0)
    disp = float(np.abs(out - grid).max())
    return SuiteResult("identity_start", disp < 1e-3, disp, grid.shape[0])


def _brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def _brute_ari(a: np.ndarray, b: np.ndarray) -> float:
    n = a.size
    pairs = list(itertools.combinations(range(n), 2))
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    index = float(np.sum(same_a & same_b))
    sa, sb, total = float(same_a.sum()), float(same_b.sum()), float(len(pairs))
    expected = sa * sb / total
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _brute_nmi(a: np.ndarray, b: np.ndarray) -> float:
    ha, hb = _entropy(a), _entropy(b)
    if np.unique(a).size < 2 or np.unique(b).size < 2:
        return 0.0
    n = a.size
    mi = 0.0
    for u in np.unique(a):
        for v in np.unique(b):
            nij = np.sum((a == u) & (b == v))
            if nij:
                mi += nij / n * np.log(n * nij / (np.sum(a == u) * np.sum(b == v)))
    return float(mi / (0.5 * (ha + hb)))


def _exact_ot_accuracy(ref: np.ndarray, src: np.ndarray, rl: np.ndarray, sl: np.ndarray):
    """Best permutation plan by enumeration; None when the optimum is not well separated."""
    n = ref.shape[0]
    M = ((ref[:, None, :] - src[None, :, :]) ** 2).sum(axis=-1)
    scored = sorted(
        (float(M[np.arange(n), list(p)].sum()), p) for p in itertools.permutations(range(n))
    )
    if scored[1][0] - scored[0][0] < 0.2 * M.mean() * n:
        return None
    best = scored[0][1]
    return float(np.mean([rl[i] == sl[best[i]] for i in range(n)]))


def metric_oracle_suite(n_instances: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checked, failures = 0.0, 0, []

    def record(name: str, err: float, tol: float) -> None:
        nonlocal worst, checked
        worst = max(worst, err / tol)
        checked += 1
        if err > tol:
            failures.append(f"{name}: {err:.3g}")

    for _ in range(n_instances):
        na, nb = rng.integers(1, 31, size=2)
        a, b = rng.normal(size=(na, 2)), rng.normal(size=(nb, 2))
        record("chamfer", abs(chamfer_distance(a, b) - _brute_chamfer(a, b)), 1e-6)

        k = int(rng.integers(1, nb + 1))
        q = rng.normal(size=2)
        idx, _ = SpatialIndex(b).query(q, k)
        d = np.sqrt(((b - q) ** 2).sum(axis=1))
        expect = np.lexsort((np.arange(nb), d))[:k]
        record("knn", float(not np.array_equal(idx, expect)), 1e-6)

        la, lb = rng.integers(0, 3, size=na), rng.integers(0, 3, size=nb)
        nn = np.argmin(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1), axis=1)
        record("nn_accuracy", abs(nn_accuracy(a, la, b, lb) - float(np.mean(lb[nn] == la))), 1e-6)

        n = int(rng.integers(2, 31))
        x, y = rng.integers(0, 3, size=n), rng.integers(0, 4, size=n)
        record("ari", abs(ari(x, y) - _brute_ari(x, y)), 1e-6)
        record("nmi", abs(nmi(x, y) - _brute_nmi(x, y)), 1e-6)

    record("ari_exact", abs(ari([0, 0, 1, 1], [0, 1, 0, 1]) + 0.5), 1e-15)

    found = 0
    while found < n_instances:
        n = int(rng.choice([2, 3]))
        ref, src = rng.uniform(size=(n, 2)), rng.uniform(size=(n, 2))
        rl, sl = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
        want = _exact_ot_accuracy(ref, src, rl, sl)
        if want is None:
            continue
        found += 1
        record("ot_accuracy", abs(ot_accuracy(src, sl, ref, rl) - want), 1e-3)

    passed = not failures
    return SuiteResult("metric_oracles", passed, worst, checked, "; ".join(failures[:5]))


def run_selftest(n_seeds: int = 10) -> SelftestReport:
    started = time.perf_counter()
    report = SelftestReport()
    for suite in (
        lambda: gradient_suite(n_seeds),
        lambda: jacobian_fd_suite(n_seeds),
        closed_form_suite,
        identity_start_suite,
        metric_oracle_suite,
    ):
        result = suite()
        log.info("selftest %-22s %s (max error %.3g over %d checks) %s",
                 result.name, "ok" if result.passed else "FAILED", result.max_error, result.checked, result.detail)
        report.suites.append(result)
    report.runtime_s = time.perf_counter() - started
    return report
