import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from config import Paths, PipelineConfig
from core import pipeline
from core.checkpoint import load_checkpoint
from core.errors import CollapseError, DataError
from core.matching import forward_match_loss, reverse_match_loss
from core.synthetic import SyntheticSpec, WarpSpec, generate_synthetic


def _temp_cfg(**overrides) -> PipelineConfig:
    tmp = tempfile.mkdtemp()
    cfg = PipelineConfig(
        phase1_epochs=6,
        phase2_epochs=4,
        batch_size=64,
        checkpoint_every=2,
        log_every=0,
        num_freqs=4,
        max_log_freq=3.0,
        embed_dim=8,
        field_hidden=16,
        field_layers=2,
        decoder_hidden=16,
        decoder_layers=1,
        deform_hidden=16,
        deform_layers=2,
        head_hidden=8,
        k_neighbors=4,
        pca_components=5,
        pca_spatial_k=8,
        n_hvg=30,
        n_rotations=4,
        gmm_n_init=1,
        paths=Paths(work_dir=Path(tmp), log_dir=Path(tmp) / "logs"),
    )
    return replace(cfg, **overrides).validate()


def _pair(**kwargs):
    spec = dict(n_spots=60, n_genes=30, n_domains=3, rigid_angle_deg=0.0, seed=1)
    spec.update(kwargs)
    return generate_synthetic(SyntheticSpec(**spec))


def test_align_pair_produces_complete_result():
    cfg = _temp_cfg()
    data = _pair()
    truth = data.ref.coords[data.correspondence]
    result = pipeline.align_pair(cfg, data.src, data.ref, truth=truth)
    n = data.src.n_spots
    assert result.deformed_coords.shape == (n, 2)
    assert result.embeddings_ref.shape == (data.ref.n_spots, 8)
    assert result.embeddings_src.shape == (n, 8)
    assert result.jacobians.shape == (n, 2, 2)
    assert len(result.loss_history) == cfg.phase1_epochs + cfg.phase2_epochs
    assert [row["phase"] for row in result.loss_history] == [1] * 6 + [2] * 4
    report = result.report
    assert report.ot_acc is not None and report.nn_acc is not None
    assert report.ari is not None and report.pca_ari is not None
    assert report.correspondence_error is not None and report.fold_fraction is not None
    assert result.rigid_report.chamfer >= 0.0
    assert result.networks.field_src is None


def test_coarse_to_fine_window_in_history():
    cfg = _temp_cfg()
    data = _pair()
    result = pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    alphas = [row["alpha"] for row in result.loss_history]
    assert alphas[0] == 0.0
    assert alphas[:6] == sorted(alphas[:6])
    assert all(a == cfg.num_freqs for a in alphas[6:])
    assert result.report is None


def test_same_seed_is_deterministic():
    cfg = _temp_cfg()
    data = _pair()
    a = pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    b = pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    assert np.array_equal(a.deformed_coords, b.deformed_coords)
    assert a.loss_history == b.loss_history


def test_skipping_both_phases_keeps_rigid_result():
    cfg = _temp_cfg(skip_phase1=True, skip_phase2=True)
    data = _pair()
    result = pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    assert result.loss_history == []
    span = np.ptp(data.ref.coords, axis=0).max()
    assert np.abs(result.deformed_coords - result.rigid_coords).max() < 1e-3 * span


def test_skip_phase1_uses_untrained_fields():
    cfg = _temp_cfg(skip_phase1=True)
    data = _pair()
    result = pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    assert [row["phase"] for row in result.loss_history] == [2] * cfg.phase2_epochs


def test_phase1_reconstruction_improves():
    cfg = _temp_cfg(phase1_epochs=120, phase1_lr=3e-3)
    data = _pair(n_spots=30, n_genes=12, dropout=0.0)
    prepared = pipeline.prepare_pair(cfg, data.src, data.ref)
    outcome = pipeline.run_phase1(cfg, prepared)
    recon = [row["recon"] for row in outcome.history]
    assert np.mean(recon[-10:]) < 0.8 * np.mean(recon[:5])
    assert outcome.best_epoch is not None and outcome.best_epoch >= 40


def test_phase1_writes_best_checkpoint():
    cfg = _temp_cfg()
    data = _pair()
    prepared = pipeline.prepare_pair(cfg, data.src, data.ref)
    ckpt_dir = Path(tempfile.mkdtemp())
    outcome = pipeline.run_phase1(cfg, prepared, checkpoint_dir=ckpt_dir)
    networks, meta = load_checkpoint(outcome.checkpoint)
    assert {"field_ref", "field_src", "decoder", "deform_trunk", "deform_head"} <= set(networks)
    assert meta["epoch"] == outcome.best_epoch


def test_identical_slices_do_not_deform():
    cfg = _temp_cfg(phase1_epochs=10, phase2_epochs=10)
    data = _pair(warp=WarpSpec("none"))
    result = pipeline.align_pair(cfg, data.ref, data.ref)
    diameter = np.linalg.norm(np.ptp(data.ref.coords, axis=0))
    assert result.displacement.mean() < 0.02 * diameter
    assert result.report.nn_acc == 1.0


def test_collapsed_source_raises():
    cfg = _temp_cfg(collapse_area_ratio=100.0)
    data = _pair()
    with pytest.raises(CollapseError) as info:
        pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    assert info.value.diagnostics["epoch"] == 0
    assert info.value.diagnostics["source_bbox_area"] < 100.0 * info.value.diagnostics["reference_bbox_area"]


def test_phase1_targets_use_scaled_expression(monkeypatch):
    cfg = _temp_cfg(phase1_epochs=2)
    data = _pair()
    prepared = pipeline.prepare_pair(cfg, data.src, data.ref)
    seen = {}
    original = pipeline.pca_match_targets

    def _capture(src, ref, *args, **kwargs):
        seen.update(src=src, ref=ref, normalize=kwargs.get("normalize", True))
        return original(src, ref, *args, **kwargs)

    monkeypatch.setattr(pipeline, "pca_match_targets", _capture)
    pipeline.run_phase1(cfg, prepared)
    assert seen["src"] is prepared.src.scaled and seen["ref"] is prepared.ref.scaled
    assert seen["normalize"] is False


def test_phase1_never_ends_with_worse_chamfer_than_it_started():
    cfg = _temp_cfg(phase1_epochs=12)
    data = _pair(warp=WarpSpec("sinusoidal", amplitude=0.1, frequency=2.0))
    prepared = pipeline.prepare_pair(cfg, data.src, data.ref)
    start = pipeline.Networks.build(cfg, len(prepared.ref.genes))
    initial = pipeline._deform_chamfer(start.deform, prepared, cfg.num_freqs)
    outcome = pipeline.run_phase1(cfg, prepared)
    final = pipeline._deform_chamfer(outcome.networks.deform, prepared, cfg.num_freqs)
    assert final == pytest.approx(outcome.best_chamfer)
    assert final <= initial


def test_five_spot_slices_are_memorized():
    cfg = _temp_cfg(
        phase1_epochs=2000, batch_size=16, checkpoint_every=10, embed_dim=16, field_hidden=64, field_layers=3,
        decoder_hidden=64, pca_components=3, pca_spatial_k=4, n_hvg=8,
    )
    data = _pair(n_spots=5, n_genes=8, n_domains=2, dropout=0.0)
    prepared = pipeline.prepare_pair(cfg, data.src, data.ref)
    nets = pipeline.run_phase1(cfg, prepared).networks
    L = cfg.num_freqs
    assert pipeline.full_recon_loss(nets.field_ref, nets.decoder, prepared.ref_xy, prepared.ref.log_expr, L) < 1e-2
    assert pipeline.full_recon_loss(nets.field_src, nets.decoder, prepared.src_xy, prepared.src.log_expr, L) < 1e-2


def test_twin_slices_share_an_embedding_space():
    cfg = _temp_cfg(phase1_epochs=60)
    data = _pair(warp=WarpSpec("none"))
    prepared = pipeline.prepare_pair(cfg, data.ref, data.ref)
    nets = pipeline.run_phase1(cfg, prepared).networks
    e_ref, _ = nets.field_ref.forward(prepared.ref_xy, cfg.num_freqs)
    e_src, _ = nets.field_src.forward(prepared.src_xy, cfg.num_freqs)
    cos = (e_ref * e_src).sum(axis=1) / (np.linalg.norm(e_ref, axis=1) * np.linalg.norm(e_src, axis=1))
    assert cos.mean() >= 0.9


def _bench_cfg(**overrides) -> PipelineConfig:
    base = dict(
        phase1_epochs=150, phase2_epochs=150, batch_size=128, checkpoint_every=5, num_freqs=6, max_log_freq=5.0,
        embed_dim=16, field_hidden=64, field_layers=3, decoder_hidden=64, deform_hidden=64, deform_layers=4,
        head_hidden=32, k_neighbors=8, pca_components=15, pca_spatial_k=16, n_hvg=60, n_rotations=12,
    )
    base.update(overrides)
    return _temp_cfg(**base)


def _bench_pair(**kwargs):
    spec = dict(n_spots=300, n_genes=60, n_domains=3, rigid_angle_deg=30.0, seed=4)
    spec.update(kwargs)
    return generate_synthetic(SyntheticSpec(**spec))


def test_reduced_benchmark_beats_rigid_alignment():
    data = _bench_pair()
    truth = data.ref.coords[data.correspondence]
    result = pipeline.align_pair(_bench_cfg(), data.src, data.ref, truth=truth)
    rigid, deformed = result.rigid_report, result.report
    assert deformed.chamfer <= 0.25 * rigid.chamfer
    assert deformed.nn_acc >= rigid.nn_acc
    assert deformed.correspondence_error <= 0.5 * rigid.correspondence_error


def test_dropping_the_jacobian_term_folds_more():
    data = _bench_pair(warp=WarpSpec("sinusoidal", amplitude=0.15, frequency=2.0))
    kept = pipeline.align_pair(_bench_cfg(lambda_j=0.05), data.src, data.ref)
    dropped = pipeline.align_pair(_bench_cfg(lambda_j=0.05, no_jacobian=True), data.src, data.ref)
    assert dropped.report.fold_fraction > kept.report.fold_fraction


def test_skipping_phase1_lowers_clustering_agreement():
    data = _bench_pair()
    full = pipeline.align_pair(_bench_cfg(phase1_epochs=100, phase2_epochs=3), data.src, data.ref)
    ablated = pipeline.align_pair(
        _bench_cfg(phase1_epochs=100, phase2_epochs=3, skip_phase1=True), data.src, data.ref
    )
    assert ablated.report.ari < full.report.ari


def test_match_loss_decreases_without_reconstruction():
    cfg = _bench_cfg(phase1_epochs=20, phase2_epochs=40, lambda_r=0.0)
    data = _bench_pair()
    prepared = pipeline.prepare_pair(cfg, data.src, data.ref)
    nets = pipeline.run_phase1(cfg, prepared).networks
    L = cfg.num_freqs
    e_ref, _ = nets.field_ref.forward(prepared.ref_xy, L)
    e_src, _ = nets.field_src.forward(prepared.src_xy, L)
    start, _ = nets.deform.forward(prepared.src_xy, L)
    outcome = pipeline.run_phase2(cfg, nets, prepared)

    def match(moved):
        fwd, _ = forward_match_loss(moved, e_src, prepared.ref_xy, e_ref, outcome.match_state, cfg.k_neighbors)
        rev = reverse_match_loss(prepared.ref_xy, e_ref, moved, e_src, outcome.match_state, cfg.k_neighbors)
        return fwd.loss + rev.loss

    assert match(outcome.deformed) < match(start)


def test_final_checkpoint_supports_embedding():
    tmp = Path(tempfile.mkdtemp())
    cfg = _temp_cfg()
    cfg = replace(cfg, paths=replace(cfg.paths, checkpoint_dir=tmp))
    data = _pair()
    result = pipeline.align_pair(cfg, data.src, data.ref, evaluate_metrics=False)
    assert [p.name for p in result.checkpoint_paths] == ["phase1_best.ckpt", "final.ckpt"]
    networks, meta = load_checkpoint(tmp / "final.ckpt")
    assert set(networks) == {"field_ref", "decoder", "deform_trunk", "deform_head"}
    assert meta["alpha"] == float(cfg.num_freqs)
    assert len(meta["genes"]) == result.networks.decoder.n_genes


def test_too_few_reference_spots():
    cfg = _temp_cfg(k_neighbors=12)
    data = _pair(n_spots=10)
    with pytest.raises(DataError):
        pipeline.prepare_pair(cfg, data.src, data.ref)


def test_series_chains_in_first_slice_frame():
    cfg = _temp_cfg(phase1_epochs=2, phase2_epochs=2)
    data = _pair()
    third = data.src.with_coords(data.src.coords + np.array([0.2, -0.1]))
    series = pipeline.align_series(cfg, [data.ref, data.src, third])
    assert len(series.results) == 2
    assert [r.seed for r in series.results] == [cfg.seed, cfg.seed + 1]
    np.testing.assert_array_equal(series.coords[0], data.ref.coords)
    assert series.coords[2].shape == (data.src.n_spots, 2)
    with pytest.raises(DataError):
        pipeline.align_series(cfg, [data.ref])
