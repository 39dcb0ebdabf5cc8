"""Two-phase alignment: paired-field pretraining, then joint deformation + canonical field."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import PipelineConfig
from core import diffcore
from core.checkpoint import save_checkpoint
from core.diffcore import AdamState, PlateauScheduler, adam_step, plateau_update
from core.encoding import EncodingSpec, alpha_schedule
from core.errors import CollapseError, DataError, NonFiniteError
from core.fields import (
    DeformNet,
    ExprDecoder,
    ExprField,
    jacobian_batch,
    jacobian_batch_backward,
    jacobian_penalty,
    network_state,
)
from core.logger import get_logger
from core.matching import (
    MatchState,
    SpatialIndex,
    forward_match_loss,
    pca_match_targets,
    reconstruction_loss,
    reverse_match_loss,
    smooth_targets,
    update_state,
)
from core.metrics import MetricReport, chamfer_distance, evaluate
from core.rigid import CoordinateScaler, IcpReport, RigidTransform, default_angles, select_rotation, zscore_normalize
from core.slices import PreprocessReport, ProcessedSlice, Slice, preprocess

log = get_logger(__name__)

LOSS_COLUMNS = (
    "phase", "epoch", "total", "match", "recon", "jacobian", "reverse_full", "pretrain", "alpha", "lr",
)


@dataclass
class Networks:
    field_ref: ExprField
    field_src: Optional[ExprField]
    decoder: ExprDecoder
    deform: DeformNet
    encoding: EncodingSpec

    @classmethod
    def build(cls, cfg: PipelineConfig, n_genes: int) -> "Networks":
        enc = EncodingSpec(cfg.num_freqs, cfg.max_log_freq)
        s = cfg.seed
        return cls(
            field_ref=ExprField.build(enc, s + 11, cfg.field_hidden, cfg.field_layers, cfg.embed_dim),
            # paired fields start from the same weights
            field_src=ExprField.build(enc, s + 11, cfg.field_hidden, cfg.field_layers, cfg.embed_dim),
            decoder=ExprDecoder.build(n_genes, s + 37, cfg.embed_dim, cfg.decoder_hidden, cfg.decoder_layers),
            deform=DeformNet.build(
                enc, s + 53, cfg.deform_hidden, cfg.deform_layers, cfg.head_hidden, cfg.head_init_scale
            ),
            encoding=enc,
        )

    def copy(self) -> "Networks":
        return Networks(
            self.field_ref.copy(),
            self.field_src.copy() if self.field_src is not None else None,
            self.decoder.copy(),
            self.deform.copy(),
            self.encoding,
        )

    def state(self):
        return network_state(self.field_ref, self.decoder, self.deform, self.field_src)


@dataclass
class PreparedPair:
    """Preprocessed slices with coordinates normalized and the source rigidly pre-aligned."""

    src: ProcessedSlice
    ref: ProcessedSlice
    src_xy: np.ndarray
    ref_xy: np.ndarray
    src_scaler: CoordinateScaler
    ref_scaler: CoordinateScaler
    rigid: RigidTransform
    icp: IcpReport
    preprocess: PreprocessReport

    def to_reference_units(self, points: np.ndarray) -> np.ndarray:
        return self.ref_scaler.denormalize(points)


@dataclass
class Phase1Outcome:
    networks: Networks
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_recon: float = float("nan")
    best_deform_epoch: Optional[int] = None
    best_chamfer: float = float("nan")
    checkpoint: Optional[Path] = None


@dataclass
class AlignmentResult:
    rigid: RigidTransform
    icp: IcpReport
    src_scaler: CoordinateScaler
    ref_scaler: CoordinateScaler
    rigid_coords: np.ndarray
    deformed_coords: np.ndarray
    deformed_normalized: np.ndarray
    embeddings_ref: np.ndarray
    embeddings_src: np.ndarray
    jacobians: np.ndarray
    loss_history: List[Dict[str, float]]
    match_state: MatchState
    networks: Networks
    src_ids: List[str] = field(default_factory=list)
    ref_ids: List[str] = field(default_factory=list)
    checkpoint_paths: List[Path] = field(default_factory=list)
    report: Optional[MetricReport] = None
    rigid_report: Optional[MetricReport] = None
    seed: int = 0
    runtime_s: float = 0.0

    @property
    def displacement(self) -> np.ndarray:
        return np.linalg.norm(self.deformed_coords - self.rigid_coords, axis=1)


def _loss_row(phase: int, epoch: int, **values: float) -> Dict[str, float]:
    row = {c: 0.0 for c in LOSS_COLUMNS}
    row.update(phase=phase, epoch=epoch)
    row.update(values)
    return row


def _check_finite(value: float, what: str, **diagnostics: Any) -> None:
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {what}", {"value": value, **diagnostics})


def _batches(rng: np.random.Generator, n_ref: int, n_src: int, batch_size: int):
    """Mini-batches over the union of both slices as (ref rows, src rows)."""
    perm = rng.permutation(n_ref + n_src)
    for start in range(0, perm.size, batch_size):
        chunk = perm[start : start + batch_size]
        yield np.sort(chunk[chunk < n_ref]), np.sort(chunk[chunk >= n_ref] - n_ref)


def _recon_step(
    fld: ExprField, dec: ExprDecoder, x: np.ndarray, target: np.ndarray, alpha: float
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Reconstruction loss with (field grad, decoder grad, coordinate grad)."""
    emb, fc = fld.forward(x, alpha)
    pred, dc = diffcore.mlp_forward_cached(dec.params, dec.spec, emb)
    terms, g_pred = reconstruction_loss(pred, target)
    g_dec, g_emb = diffcore.mlp_backward(dec.params, dec.spec, None, g_pred, dc)
    g_fld, g_x = fld.backward(x, alpha, fc, g_emb)
    return terms.total, g_fld, g_dec, g_x


def full_recon_loss(fld: ExprField, dec: ExprDecoder, x: np.ndarray, target: np.ndarray, alpha: float) -> float:
    emb, _ = fld.forward(x, alpha)
    terms, _ = reconstruction_loss(diffcore.mlp_forward(dec.params, dec.spec, emb), target)
    return terms.total


def _deform_chamfer(net: DeformNet, pair: PreparedPair, alpha: float) -> float:
    moved, _ = net.forward(pair.src_xy, alpha)
    return chamfer_distance(moved, pair.ref_xy)


def prepare_pair(cfg: PipelineConfig, src_raw: Slice, ref_raw: Slice) -> PreparedPair:
    """Preprocess, normalize and rigidly pre-align the source onto the reference."""
    if ref_raw.n_spots < cfg.k_neighbors + 1:
        raise DataError(
            f"reference has {ref_raw.n_spots} spots; at least k_neighbors + 1 = {cfg.k_neighbors + 1} required"
        )
    src, ref, pre = preprocess(src_raw, ref_raw, cfg.n_hvg)
    src_n, ref_n, (s_src, s_ref) = zscore_normalize(src.coords, ref.coords)
    rigid, icp = select_rotation(
        src_n, ref_n, src.log_expr, ref.log_expr,
        default_angles(cfg.n_rotations), cfg.allow_reflection, cfg.icp_max_iter, cfg.icp_tol,
    )
    return PreparedPair(src, ref, rigid.apply(src_n), ref_n, s_src, s_ref, rigid, icp, pre)


def run_phase1(
    cfg: PipelineConfig, pair: PreparedPair, networks: Optional[Networks] = None,
    checkpoint_dir: Optional[Path] = None,
) -> Phase1Outcome:
    """Paired fields through one shared decoder, plus PCA-guided deformation pretraining.

    The best combined reconstruction snapshot (fields and decoder) is restored at the end.
    """
    nets = networks or Networks.build(cfg, len(pair.ref.genes))
    outcome = Phase1Outcome(nets)
    if cfg.skip_phase1 or cfg.phase1_epochs == 0:
        # an untrained source field shares no space with the reference field
        nets.field_src = None
        log.info("Phase 1 skipped")
        return outcome
    L = nets.encoding.num_freqs
    matched = pca_match_targets(
        pair.src.scaled, pair.ref.scaled, pair.src_xy, pair.ref_xy,
        cfg.pca_components, cfg.pca_spatial_k, normalize=False,
    )
    targets = smooth_targets(pair.src_xy, matched, cfg.target_smooth_k)
    use_jac = not cfg.no_jacobian and cfg.lambda_j > 0
    opt_fr = AdamState.for_params(nets.field_ref.params, cfg.phase1_lr)
    opt_fs = AdamState.for_params(nets.field_src.params, cfg.phase1_lr)
    opt_dec = AdamState.for_params(nets.decoder.params, cfg.phase1_lr)
    opt_tr = AdamState.for_params(nets.deform.trunk_params, cfg.deform_pretrain_lr)
    opt_hd = AdamState.for_params(nets.deform.head_params, cfg.deform_pretrain_lr)
    rng = np.random.default_rng(cfg.seed + 101)
    n_ref, n_src = pair.ref.n_spots, pair.src.n_spots
    best: Optional[Tuple[ExprField, ExprField, ExprDecoder]] = None
    epochs = cfg.phase1_epochs
    window_open = int(np.ceil(epochs / 3.0))
    best_deform = nets.deform.copy()
    outcome.best_chamfer = _deform_chamfer(nets.deform, pair, L)

    for epoch in range(epochs):
        alpha = alpha_schedule(epoch, epochs, L)
        recon_sum = pre_sum = 0.0
        n_batches = 0
        for r_idx, s_idx in _batches(rng, n_ref, n_src, cfg.batch_size):
            g_dec = nets.decoder.params.zeros_like()
            recon = pretrain = 0.0
            if r_idx.size:
                loss, g_fr, gd, _ = _recon_step(
                    nets.field_ref, nets.decoder, pair.ref_xy[r_idx], pair.ref.log_expr[r_idx], alpha
                )
                recon += loss
                g_dec += gd
                nets.field_ref = replace(nets.field_ref, params=adam_step(opt_fr, nets.field_ref.params, g_fr))
            if s_idx.size:
                loss, g_fs, gd, _ = _recon_step(
                    nets.field_src, nets.decoder, pair.src_xy[s_idx], pair.src.log_expr[s_idx], alpha
                )
                recon += loss
                g_dec += gd
                nets.field_src = replace(nets.field_src, params=adam_step(opt_fs, nets.field_src.params, g_fs))
                moved, dcache = nets.deform.forward(pair.src_xy[s_idx], alpha)
                resid = moved - targets[s_idx]
                pretrain = float((resid * resid).sum(axis=1).mean())
                g_tr, g_hd = nets.deform.backward(dcache, 2.0 * resid / s_idx.size)
                if use_jac:
                    m = min(cfg.jacobian_samples, s_idx.size)
                    pick = np.sort(rng.choice(s_idx, size=m, replace=False))
                    J, jcache = jacobian_batch(nets.deform, pair.src_xy[pick], alpha)
                    jac, g_J, _ = jacobian_penalty(J)
                    gt, gh = jacobian_batch_backward(nets.deform, jcache, g_J)
                    g_tr += cfg.lambda_j * gt
                    g_hd += cfg.lambda_j * gh
                    pretrain += cfg.lambda_j * jac
                nets.deform = replace(
                    nets.deform,
                    trunk_params=adam_step(opt_tr, nets.deform.trunk_params, g_tr),
                    head_params=adam_step(opt_hd, nets.deform.head_params, g_hd),
                )
            _check_finite(recon + pretrain, "phase 1 loss", epoch=epoch, recon=recon, pretrain=pretrain)
            nets.decoder = replace(nets.decoder, params=adam_step(opt_dec, nets.decoder.params, g_dec))
            recon_sum += recon
            pre_sum += pretrain
            n_batches += 1

        row = _loss_row(
            1, epoch, total=(recon_sum + pre_sum) / n_batches, recon=recon_sum / n_batches,
            pretrain=pre_sum / n_batches, alpha=alpha, lr=opt_dec.lr,
        )
        outcome.history.append(row)
        last = epoch == epochs - 1
        if last or (epoch >= window_open and (epoch + 1) % cfg.checkpoint_every == 0):
            val = full_recon_loss(nets.field_ref, nets.decoder, pair.ref_xy, pair.ref.log_expr, alpha) + \
                full_recon_loss(nets.field_src, nets.decoder, pair.src_xy, pair.src.log_expr, alpha)
            _check_finite(val, "phase 1 validation loss", epoch=epoch)
            if best is None or val < outcome.best_recon:
                outcome.best_recon, outcome.best_epoch = val, epoch
                best = (nets.field_ref.copy(), nets.field_src.copy(), nets.decoder.copy())
            cd = _deform_chamfer(nets.deform, pair, L)
            if cd < outcome.best_chamfer:
                outcome.best_chamfer, outcome.best_deform_epoch = cd, epoch
                best_deform = nets.deform.copy()
        if cfg.log_every and (epoch % cfg.log_every == 0 or last):
            log.info("Phase 1 epoch %d/%d: recon %.4f pretrain %.4f alpha %.2f",
                     epoch + 1, epochs, row["recon"], row["pretrain"], alpha)

    nets.deform = best_deform
    if outcome.best_deform_epoch is None:
        log.warning("Phase 1: pretraining never lowered Chamfer (%.4g); keeping the initial deformation",
                    outcome.best_chamfer)
    else:
        log.info("Phase 1: deformation from epoch %d (Chamfer %.4g)", outcome.best_deform_epoch + 1,
                 outcome.best_chamfer)
    if best is not None:
        nets.field_ref, nets.field_src, nets.decoder = best
        log.info("Phase 1: restored best reconstruction checkpoint (epoch %d, loss %.4f)",
                 outcome.best_epoch + 1, outcome.best_recon)
        if checkpoint_dir is not None:
            outcome.checkpoint = save_checkpoint(
                Path(checkpoint_dir) / "phase1_best.ckpt", nets.state(),
                {
                    "epoch": outcome.best_epoch, "recon": outcome.best_recon,
                    "deform_epoch": outcome.best_deform_epoch, "chamfer": outcome.best_chamfer,
                    "encoding": nets.encoding.to_dict(),
                },
            )
    return outcome


@dataclass
class Phase2Outcome:
    networks: Networks
    history: List[Dict[str, float]]
    match_state: MatchState
    deformed: np.ndarray
    embeddings_ref: np.ndarray
    embeddings_src: np.ndarray
    jacobians: np.ndarray


def _bbox_area(points: np.ndarray) -> float:
    span = points.max(axis=0) - points.min(axis=0)
    return float(span[0] * span[1])


def run_phase2(cfg: PipelineConfig, networks: Networks, pair: PreparedPair) -> Phase2Outcome:
    """Joint optimization of match + lambda_r recon + lambda_j Jacobian terms.

    Embeddings used for matching are computed once from the Phase-1 fields and held fixed;
    the source field is dropped before any update.
    """
    nets = networks
    L = float(nets.encoding.num_freqs)
    ref_xy, src_xy = pair.ref_xy, pair.src_xy
    E_ref, _ = nets.field_ref.forward(ref_xy, L)
    src_field = nets.field_src or nets.field_ref
    E_src, _ = src_field.forward(src_xy, L)
    nets.field_src = None

    state = MatchState(tau=cfg.tau_init, ema_decay=cfg.ema_decay, lambda_f=cfg.lambda_f)
    history: List[Dict[str, float]] = []
    use_jac = not cfg.no_jacobian and cfg.lambda_j > 0
    lam_r, lam_j = cfg.lambda_r, cfg.lambda_j
    n_ref, n_src = pair.ref.n_spots, pair.src.n_spots
    ref_index = SpatialIndex(ref_xy)
    ref_area = _bbox_area(ref_xy)

    if not cfg.skip_phase2 and cfg.phase2_epochs > 0:
        opt_fr = AdamState.for_params(nets.field_ref.params, cfg.lr)
        opt_dec = AdamState.for_params(nets.decoder.params, cfg.lr)
        opt_tr = AdamState.for_params(nets.deform.trunk_params, cfg.lr)
        opt_hd = AdamState.for_params(nets.deform.head_params, cfg.lr)
        optimizers = (opt_fr, opt_dec, opt_tr, opt_hd)
        sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr)
        rng = np.random.default_rng(cfg.seed + 202)
        k = cfg.k_neighbors

        for epoch in range(cfg.phase2_epochs):
            sums = {"total": 0.0, "match": 0.0, "recon": 0.0, "jacobian": 0.0}
            n_batches = 0
            for r_idx, s_idx in _batches(rng, n_ref, n_src, cfg.batch_size):
                g_fr = nets.field_ref.params.zeros_like()
                g_dec = nets.decoder.params.zeros_like()
                g_tr = nets.deform.trunk_params.zeros_like()
                g_hd = nets.deform.head_params.zeros_like()
                match = recon = jac = 0.0
                if r_idx.size:
                    loss, gf, gd, _ = _recon_step(nets.field_ref, nets.decoder, ref_xy[r_idx], pair.ref.log_expr[r_idx], L)
                    recon += loss
                    g_fr += lam_r * gf
                    g_dec += lam_r * gd
                if s_idx.size:
                    moved, dcache = nets.deform.forward(src_xy[s_idx], L)
                    loss, gf, gd, g_moved = _recon_step(
                        nets.field_ref, nets.decoder, moved, pair.src.log_expr[s_idx], L
                    )
                    recon += loss
                    g_fr += lam_r * gf
                    g_dec += lam_r * gd
                    g_x = lam_r * g_moved

                    fwd, new_state = forward_match_loss(moved, E_src[s_idx], ref_xy, E_ref, state, k, ref_index)
                    match += fwd.loss
                    g_x = g_x + fwd.grad
                    if r_idx.size:
                        rev = reverse_match_loss(ref_xy[r_idx], E_ref[r_idx], moved, E_src[s_idx], new_state, k)
                        match += rev.loss
                        g_x = g_x + rev.grad
                    gt, gh = nets.deform.backward(dcache, g_x)
                    g_tr += gt
                    g_hd += gh

                    if use_jac:
                        m = min(cfg.jacobian_samples, s_idx.size)
                        pick = np.sort(rng.choice(s_idx, size=m, replace=False))
                        J, jcache = jacobian_batch(nets.deform, src_xy[pick], L)
                        jac, g_J, _ = jacobian_penalty(J)
                        gt, gh = jacobian_batch_backward(nets.deform, jcache, g_J)
                        g_tr += lam_j * gt
                        g_hd += lam_j * gh
                    state = update_state(new_state, fwd.mean_sq_dist, fwd.mean_cos_dist, fwd.mean_weighted_cost)

                total = match + lam_r * recon + lam_j * jac
                _check_finite(total, "phase 2 loss", epoch=epoch, match=match, recon=recon, jacobian=jac)
                nets.field_ref = replace(nets.field_ref, params=adam_step(opt_fr, nets.field_ref.params, g_fr))
                nets.decoder = replace(nets.decoder, params=adam_step(opt_dec, nets.decoder.params, g_dec))
                if s_idx.size:
                    nets.deform = replace(
                        nets.deform,
                        trunk_params=adam_step(opt_tr, nets.deform.trunk_params, g_tr),
                        head_params=adam_step(opt_hd, nets.deform.head_params, g_hd),
                    )
                sums["total"] += total
                sums["match"] += match
                sums["recon"] += recon
                sums["jacobian"] += jac
                n_batches += 1

            # full-coverage reverse pass
            moved_all, dcache = nets.deform.forward(src_xy, L)
            area = _bbox_area(moved_all)
            if area < cfg.collapse_area_ratio * ref_area:
                raise CollapseError(
                    "deformed source collapsed",
                    {"epoch": epoch, "source_bbox_area": area, "reference_bbox_area": ref_area},
                )
            rev_full = reverse_match_loss(ref_xy, E_ref, moved_all, E_src, state, k)
            _check_finite(rev_full.loss, "reverse matching loss", epoch=epoch)
            gt, gh = nets.deform.backward(dcache, rev_full.grad)
            nets.deform = replace(
                nets.deform,
                trunk_params=adam_step(opt_tr, nets.deform.trunk_params, gt),
                head_params=adam_step(opt_hd, nets.deform.head_params, gh),
            )

            epoch_loss = sums["total"] / n_batches
            row = _loss_row(
                2, epoch, total=epoch_loss, match=sums["match"] / n_batches, recon=sums["recon"] / n_batches,
                jacobian=sums["jacobian"] / n_batches, reverse_full=rev_full.loss, alpha=L, lr=sched.lr,
            )
            history.append(row)
            if epoch == 9 and use_jac and row["match"] > 0:
                log.info("Phase 2 epoch 10: Jacobian term at %.1f%% of the match loss",
                         100.0 * lam_j * row["jacobian"] / row["match"])
            lr = plateau_update(sched, epoch_loss)
            for opt in optimizers:
                opt.lr = lr
            if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.phase2_epochs - 1):
                log.info(
                    "Phase 2 epoch %d/%d: total %.4f match %.4f recon %.4f jac %.4f reverse %.4f lr %.2g tau %.3g",
                    epoch + 1, cfg.phase2_epochs, epoch_loss, row["match"], row["recon"], row["jacobian"],
                    rev_full.loss, row["lr"], state.tau,
                )
    else:
        log.info("Phase 2 skipped")

    deformed, _ = nets.deform.forward(src_xy, L)
    if not np.all(np.isfinite(deformed)):
        raise NonFiniteError("non-finite deformed coordinates", {"count": int((~np.isfinite(deformed)).sum())})
    emb_ref, _ = nets.field_ref.forward(ref_xy, L)
    emb_src, _ = nets.field_ref.forward(deformed, L)
    J, _ = jacobian_batch(nets.deform, src_xy, L)
    return Phase2Outcome(nets, history, state, deformed, emb_ref, emb_src, J)


def _evaluate(cfg: PipelineConfig, pair: PreparedPair, coords: np.ndarray, truth: Optional[np.ndarray],
              embeddings=None, expression=None, jacobians=None) -> MetricReport:
    return evaluate(
        coords, pair.ref.coords, pair.src.labels, pair.ref.labels,
        embeddings=embeddings, expression=expression, truth=truth, jacobians=jacobians,
        ot_reg_scale=cfg.ot_reg_scale, ot_max_iter=cfg.ot_max_iter, ot_tol=cfg.ot_tol,
        gmm_n_init=cfg.gmm_n_init, n_clusters=cfg.n_clusters, pca_components=cfg.pca_components, seed=cfg.seed,
    )


def align_pair(
    cfg: PipelineConfig,
    src_raw: Slice,
    ref_raw: Slice,
    truth: Optional[np.ndarray] = None,
    evaluate_metrics: bool = True,
) -> AlignmentResult:
    """Full pipeline: preprocess, normalize, rigid, Phase 1, Phase 2, metrics.

    ``truth`` holds the known reference-frame partner of every source spot, when available.
    """
    cfg.validate()
    started = time.perf_counter()
    log.info("Aligning %d source spots onto %d reference spots (seed %d)", src_raw.n_spots, ref_raw.n_spots, cfg.seed)
    pair = prepare_pair(cfg, src_raw, ref_raw)
    ckpt_dir = cfg.paths.checkpoint_dir
    phase1 = run_phase1(cfg, pair, checkpoint_dir=ckpt_dir)
    phase2 = run_phase2(cfg, phase1.networks, pair)

    rigid_coords = pair.to_reference_units(pair.src_xy)
    deformed = pair.to_reference_units(phase2.deformed)
    result = AlignmentResult(
        rigid=pair.rigid,
        icp=pair.icp,
        src_scaler=pair.src_scaler,
        ref_scaler=pair.ref_scaler,
        rigid_coords=rigid_coords,
        deformed_coords=deformed,
        deformed_normalized=phase2.deformed,
        embeddings_ref=phase2.embeddings_ref,
        embeddings_src=phase2.embeddings_src,
        jacobians=phase2.jacobians,
        loss_history=phase1.history + phase2.history,
        match_state=phase2.match_state,
        networks=phase2.networks,
        src_ids=list(pair.src.ids),
        ref_ids=list(pair.ref.ids),
        seed=cfg.seed,
    )
    if phase1.checkpoint is not None:
        result.checkpoint_paths.append(phase1.checkpoint)
    if ckpt_dir is not None:
        result.checkpoint_paths.append(
            save_checkpoint(Path(ckpt_dir) / "final.ckpt", network_state(
                result.networks.field_ref, result.networks.decoder, result.networks.deform
            ), embedding_meta(result, pair.ref.genes))
        )
    if evaluate_metrics:
        result.rigid_report = _evaluate(cfg, pair, rigid_coords, truth)
        result.report = _evaluate(
            cfg, pair, deformed, truth,
            embeddings=(result.embeddings_ref, result.embeddings_src),
            expression=(pair.ref.log_expr, pair.src.log_expr),
            jacobians=result.jacobians,
        )
        log.info("Chamfer %.4g (rigid only %.4g)", result.report.chamfer, result.rigid_report.chamfer)
    result.runtime_s = time.perf_counter() - started
    return result


def embedding_meta(result: AlignmentResult, genes: Sequence[str]) -> Dict[str, Any]:
    """Everything ``embed`` needs to map reference-frame coordinates to embeddings."""
    return {
        "encoding": result.networks.encoding.to_dict(),
        "alpha": float(result.networks.encoding.num_freqs),
        "ref_scaler": result.ref_scaler.to_dict(),
        "genes": list(genes),
        "seed": result.seed,
    }


@dataclass
class SeriesResult:
    results: List[AlignmentResult]
    coords: List[np.ndarray]


def align_series(cfg: PipelineConfig, slices: Sequence[Slice]) -> SeriesResult:
    """Chain pairwise alignments: slice k+1 onto aligned slice k, all in slice 0's frame."""
    if len(slices) < 2:
        raise DataError("a series needs at least two slices")
    results: List[AlignmentResult] = []
    coords = [slices[0].coords.copy()]
    anchor = slices[0]
    for k, nxt in enumerate(slices[1:], start=1):
        log.info("Series: aligning slice %d onto slice %d", k, k - 1)
        step_cfg = replace(cfg, seed=cfg.seed + k - 1)
        res = align_pair(step_cfg, nxt, anchor)
        results.append(res)
        coords.append(res.deformed_coords)
        anchor = nxt.with_coords(res.deformed_coords)
    return SeriesResult(results, coords)
