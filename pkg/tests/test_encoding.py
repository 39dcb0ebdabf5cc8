import numpy as np
import pytest

from core.encoding import EncodingSpec, alpha_schedule, encode, encode_backward, encode_jvp, window_weights


def test_origin_encodes_to_window_weights():
    spec = EncodingSpec(4, 6.0)
    alpha = 2.5
    out = encode(np.zeros(2), spec, alpha)
    w = window_weights(alpha, 4)
    assert out.shape == (spec.output_dim,)
    assert np.array_equal(out[:2], np.zeros(2))
    bands = out[2:].reshape(4, 4)
    assert not bands[:, :2].any()
    np.testing.assert_allclose(bands[:, 2], w)
    np.testing.assert_allclose(bands[:, 3], w)


def test_closed_window_keeps_only_raw_coordinates():
    spec = EncodingSpec(8, 6.0)
    x = np.array([[0.4, -1.3], [2.0, 0.1]])
    out = encode(x, spec, 0.0)
    assert np.array_equal(out[:, :2], x)
    assert not out[:, 2:].any()


def test_open_window_matches_per_term_oracle():
    spec = EncodingSpec(4, 6.0)
    x = np.array([0.3, -0.7])
    out = encode(x, spec, 4.0)
    expected = [0.3, -0.7]
    for k in range(4):
        s = 2.0 ** (k * 6.0 / 3.0)
        expected += [
            np.sin(2 * np.pi * s * 0.3), np.sin(2 * np.pi * s * -0.7),
            np.cos(2 * np.pi * s * 0.3), np.cos(2 * np.pi * s * -0.7),
        ]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_alpha_schedule_endpoints_and_midpoint():
    assert alpha_schedule(0, 300, 8) == 0.0
    assert alpha_schedule(50, 300, 8) == pytest.approx(4.0)
    assert alpha_schedule(100, 300, 8) == 8.0
    assert alpha_schedule(299, 300, 8) == 8.0


def test_alpha_outside_range_is_rejected():
    with pytest.raises(ValueError):
        encode(np.zeros(2), EncodingSpec(4), 4.5)


def test_jvp_and_backward_agree_with_finite_differences():
    spec = EncodingSpec(5, 4.0)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(3, 2))
    alpha = 3.3
    direction = rng.normal(size=(3, 2))
    eps = 1e-6
    _, out_dot = encode_jvp(x, spec, alpha, direction)
    fd = (encode(x + eps * direction, spec, alpha) - encode(x - eps * direction, spec, alpha)) / (2 * eps)
    np.testing.assert_allclose(out_dot, fd, atol=1e-6)

    g = rng.normal(size=(3, spec.output_dim))
    gx = encode_backward(x, spec, alpha, g)
    for c in range(2):
        step = np.zeros_like(x)
        step[:, c] = eps
        fd_c = ((encode(x + step, spec, alpha) - encode(x - step, spec, alpha)) * g).sum(axis=1) / (2 * eps)
        np.testing.assert_allclose(gx[:, c], fd_c, atol=1e-6)
