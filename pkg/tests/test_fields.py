import numpy as np
import pytest

from core.encoding import EncodingSpec
from core.fields import (
    DeformNet,
    ExprDecoder,
    ExprField,
    decode_expression,
    fold_fraction,
    jacobian_at,
    jacobian_loss,
    jacobian_penalty,
    make_samples,
    svd2x2,
)

ENC = EncodingSpec(4, 3.0)


def _small_deform(seed: int = 0, head_init_scale: float = 1e-4) -> DeformNet:
    return DeformNet.build(ENC, seed, hidden=16, trunk_layers=3, head_hidden=8, head_init_scale=head_init_scale)


def test_fresh_deformation_is_near_identity():
    net = DeformNet.build(EncodingSpec(), seed=0)
    g = np.linspace(0.0, 1.0, 21)
    grid = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    out, _ = net.forward(grid, 0.0)
    assert np.abs(out - grid).max() < 1e-3


def test_constant_head_bias_shifts_every_point():
    net = _small_deform()
    last = net.head_params.layers()[-1]
    last.W[...] = 0.0
    last.b[...] = [1.0, 0.0]
    x = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
    out, _ = net.forward(x, 4.0)
    np.testing.assert_allclose(out - x, np.tile([1.0, 0.0], (10, 1)), atol=1e-15)


def test_zero_head_gives_identity_jacobian():
    net = _small_deform(head_init_scale=0.0)
    assert np.array_equal(jacobian_at(net, np.array([0.2, 0.7]), 4.0), np.eye(2))


def test_jacobian_matches_finite_differences():
    net = _small_deform(seed=5, head_init_scale=0.3)
    eps = 1e-6
    for x in np.random.default_rng(2).uniform(-1, 1, size=(4, 2)):
        J = jacobian_at(net, x, 3.0)
        for k in range(2):
            step = np.zeros(2)
            step[k] = eps
            up, _ = net.forward(x + step, 3.0)
            down, _ = net.forward(x - step, 3.0)
            np.testing.assert_allclose(J[:, k], (up - down) / (2 * eps), atol=1e-5)


def test_svd2x2_closed_form():
    assert svd2x2(np.eye(2)) == pytest.approx((1.0, 1.0))
    assert svd2x2(np.diag([2.0, 0.5])) == pytest.approx((2.0, 0.5))
    theta = 0.4
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    assert svd2x2(R @ np.diag([0.3, 3.0])) == pytest.approx((3.0, 0.3))


def _loss_of(J: np.ndarray) -> float:
    return jacobian_loss(make_samples(np.zeros((1, 2)), J[None]))


def test_jacobian_loss_values():
    assert _loss_of(np.eye(2)) == 0.0
    assert _loss_of(0.5 * np.eye(2)) == pytest.approx(2 * 5 * np.log(0.5) ** 2)
    assert _loss_of(0.5 * np.eye(2)) == pytest.approx(4.804530, abs=1e-6)
    assert _loss_of(2.0 * np.eye(2)) == pytest.approx(0.960906, abs=1e-6)
    assert jacobian_loss([]) == 0.0


def test_jacobian_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    J = np.eye(2)[None] + 0.3 * rng.normal(size=(3, 2, 2))
    loss, g_J, clamped = jacobian_penalty(J)
    assert clamped == 0
    assert loss == pytest.approx(jacobian_loss(make_samples(np.zeros((3, 2)), J)))
    eps = 1e-7
    for idx in np.ndindex(J.shape):
        up, down = J.copy(), J.copy()
        up[idx] += eps
        down[idx] -= eps
        fd = (jacobian_penalty(up)[0] - jacobian_penalty(down)[0]) / (2 * eps)
        assert g_J[idx] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_jacobian_penalty_gradient_at_repeated_and_reflected_singular_values():
    theta = 0.7
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    J = np.stack([1.3 * R, 0.6 * R, np.diag([1.4, -0.8]), np.array([[0.2, 1.1], [0.9, -0.3]])])
    loss, g_J, _ = jacobian_penalty(J)
    assert loss == pytest.approx(jacobian_loss(make_samples(np.zeros((4, 2)), J)))
    eps = 1e-7
    for idx in np.ndindex(J.shape):
        up, down = J.copy(), J.copy()
        up[idx] += eps
        down[idx] -= eps
        fd = (jacobian_penalty(up)[0] - jacobian_penalty(down)[0]) / (2 * eps)
        assert g_J[idx] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_jacobian_penalty_uses_closed_form_singular_values(monkeypatch):
    def _no_svd(*args, **kwargs):
        raise AssertionError("iterative SVD called")

    monkeypatch.setattr(np.linalg, "svd", _no_svd)
    loss, g_J, clamped = jacobian_penalty(np.stack([0.5 * np.eye(2), 2.0 * np.eye(2)]))
    assert loss == pytest.approx((4.804530 + 0.960906) / 2, abs=1e-6)
    assert clamped == 0
    np.testing.assert_allclose(g_J[0], np.diag([10 * np.log(0.5) / 0.5 / 2] * 2), rtol=1e-12)


def test_head_final_layer_starts_in_small_uniform_range():
    net = DeformNet.build(EncodingSpec(), seed=3)
    last = net.head_params.layers()[-1]
    assert np.abs(last.W).max() <= 1e-4
    assert np.abs(last.W).max() > 5e-5
    assert not last.b.any()


def test_fold_fraction_counts_non_positive_determinants():
    J = np.stack([np.eye(2), np.eye(2), np.diag([1.0, -1.0]), np.zeros((2, 2))])
    assert fold_fraction(J) == 0.5


def test_zero_final_layer_gives_constant_embedding():
    fld = ExprField.build(ENC, seed=1, hidden=16, num_layers=3, embed_dim=8)
    last = fld.params.layers()[-1]
    last.W[...] = 0.0
    last.b[...] = 0.25
    emb, _ = fld.forward(np.random.default_rng(0).normal(size=(6, 2)), 4.0)
    assert np.array_equal(emb, np.full((6, 8), 0.25))


def test_zero_decoder_gives_zero_expression():
    dec = ExprDecoder.build(5, seed=0, embed_dim=8, hidden=16, num_hidden=2)
    dec.params.values[...] = 0.0
    assert not decode_expression(dec, np.ones((3, 8))).any()


def test_field_embeddings_distinguish_points():
    fld = ExprField.build(ENC, seed=2, hidden=32, num_layers=3, embed_dim=8)
    emb, _ = fld.forward(np.array([[0.1, 0.1], [0.9, -0.4]]), 4.0)
    assert np.linalg.norm(emb[0] - emb[1]) > 1e-3
