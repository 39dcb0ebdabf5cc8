import numpy as np
import pytest

from core.errors import ConfigError
from core.synthetic import SyntheticSpec, WarpSpec, apply_warp, generate_synthetic, sinusoidal_displacement


def _quiet(**kwargs) -> SyntheticSpec:
    base = dict(
        n_spots=120, n_genes=20, n_domains=3, dropout=0.0, noise_sigma=0.0, batch_sigma=0.0, gradient_strength=0.0
    )
    base.update(kwargs)
    return SyntheticSpec(**base)


def test_no_warp_no_rigid_no_noise_copies_reference():
    pair = generate_synthetic(_quiet(warp=WarpSpec("none"), rigid_angle_deg=0.0))
    np.testing.assert_array_equal(pair.src.coords, pair.ref.coords)
    np.testing.assert_array_equal(pair.src.dense(), pair.ref.dense())
    assert pair.src.labels.tolist() == pair.ref.labels.tolist()


def test_rigid_only_source_is_exact_transform():
    pair = generate_synthetic(_quiet(warp=WarpSpec("none"), rigid_angle_deg=90.0, rigid_translation=[1.0, 1.0]))
    x, y = pair.ref.coords[:, 0], pair.ref.coords[:, 1]
    np.testing.assert_allclose(pair.src.coords, np.column_stack([1.0 - y, x + 1.0]), atol=1e-12)


def test_sinusoidal_displacement_bounded_by_amplitude():
    g = np.linspace(0.0, 1.0, 81)
    grid = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    disp = np.linalg.norm(sinusoidal_displacement(grid, 0.1, 2.0), axis=1)
    assert disp.max() <= 0.1 + 1e-12
    peak = np.linalg.norm(sinusoidal_displacement(np.array([[0.125, 0.125]]), 0.1, 2.0))
    assert peak == pytest.approx(0.1)


def test_affine_warp_fixes_the_center():
    warp = WarpSpec("affine", affine=[1.2, 0.1, 0.0, 0.9])
    out = apply_warp(np.array([[0.5, 0.5], [1.0, 0.5]]), warp)
    np.testing.assert_allclose(out, [[0.5, 0.5], [1.1, 0.5]])


def test_ground_truth_pairs_every_source_spot():
    pair = generate_synthetic(_quiet())
    truth = pair.ground_truth()
    assert truth["src_id"].tolist() == pair.src.ids
    np.testing.assert_array_equal(truth[["ref_x", "ref_y"]].to_numpy(), pair.ref.coords)


def test_generation_is_deterministic_per_seed():
    a = generate_synthetic(SyntheticSpec(n_spots=50, n_genes=10, seed=3))
    b = generate_synthetic(SyntheticSpec(n_spots=50, n_genes=10, seed=3))
    c = generate_synthetic(SyntheticSpec(n_spots=50, n_genes=10, seed=4))
    np.testing.assert_array_equal(a.src.dense(), b.src.dense())
    np.testing.assert_array_equal(a.src.coords, b.src.coords)
    assert not np.array_equal(a.ref.coords, c.ref.coords)


def test_marker_genes_separate_domains():
    pair = generate_synthetic(_quiet(n_spots=300, n_domains=2))
    expr = pair.ref.dense()
    labels = pair.ref.labels
    means = np.stack([expr[labels == lab].mean(axis=0) for lab in np.unique(labels)])
    assert np.abs(np.log(means[0] / means[1])).max() == pytest.approx(np.log(6.0))


def test_spec_validation_and_parsing():
    with pytest.raises(ConfigError):
        SyntheticSpec(dropout=1.0).validate()
    with pytest.raises(ConfigError):
        WarpSpec("twist").validate()
    with pytest.raises(ConfigError):
        WarpSpec("affine", affine=[1.0, 0.0, 0.0, -1.0]).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec.from_dict({"n_spots": 10, "colour": "red"})
    spec = SyntheticSpec.from_dict({"n_spots": 10, "warp": "composite"})
    assert spec.warp.kind == "composite"
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_gradient_genes_vary_smoothly_within_a_domain():
    pair = generate_synthetic(_quiet(n_spots=400, n_domains=1, gradient_strength=0.5))
    log_expr = np.log(pair.ref.dense())
    spread = log_expr.max(axis=0) - log_expr.min(axis=0)
    assert spread.min() > 0.1
    assert spread.max() <= 1.0 + 1e-9
    xy = pair.ref.coords
    d = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    e = np.abs(log_expr[:, None] - log_expr[None]).mean(axis=-1)
    near, far = d < 0.05, d > 0.5
    assert e[near].mean() < 0.5 * e[far].mean()


def test_zero_gradient_strength_gives_piecewise_constant_domains():
    pair = generate_synthetic(_quiet(n_spots=200, n_domains=2))
    expr = pair.ref.dense()
    for lab in np.unique(pair.ref.labels):
        block = expr[pair.ref.labels == lab]
        np.testing.assert_allclose(block, np.broadcast_to(block[0], block.shape))
