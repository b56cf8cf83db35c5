import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthnerf.encoding import (
    DEPTH_PE,
    IMAGE_PE,
    ConvEncoder,
    EncoderConfig,
    PositionalEncodingConfig,
    encode_features,
    pad_and_encode,
    positional_encode,
)
from depthnerf.errors import ShapeMismatch
from depthnerf.params import FieldParams


class TestPositionalEncoding:
    def test_zero_input(self):
        out = positional_encode(np.zeros(1), PositionalEncodingConfig(3, 1.0, True))
        np.testing.assert_array_equal(out, [0, 0, 1, 0, 1, 0, 1])

    def test_depth_difference_is_13_dims(self):
        assert positional_encode(np.array([0.3]), DEPTH_PE).shape == (13,)
        assert DEPTH_PE.output_dim(1) == 13

    def test_quarter_period(self):
        out = positional_encode(np.array([0.25]), PositionalEncodingConfig(1, 1.0, False))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-15)

    def test_layout_against_loop(self, rng):
        cfg = PositionalEncodingConfig(4, 0.5, True)
        x = rng.uniform(-1, 1, size=3)
        expected = list(x)
        for k in range(3):
            for j in range(4):
                f = 0.5 * 2**j
                expected += [math.sin(2 * math.pi * f * x[k]), math.cos(2 * math.pi * f * x[k])]
        np.testing.assert_allclose(positional_encode(x, cfg), expected, atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=4))
    def test_trig_channels_bounded(self, xs):
        out = positional_encode(np.array(xs), PositionalEncodingConfig(5, 1.0, False))
        assert out.shape == (len(xs) * 10,)
        assert np.all(np.abs(out) <= 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-0.5, 0.4999), st.floats(-0.5, 0.4999))
    def test_lowest_pair_injective(self, a, b):
        cfg = PositionalEncodingConfig(1, 1.0, False)
        ea = positional_encode(np.array([a]), cfg)
        eb = positional_encode(np.array([b]), cfg)
        if abs(a - b) > 1e-6:
            assert np.linalg.norm(ea - eb) > 1e-7


class TestPadAndEncode:
    def test_no_pad(self, rng):
        img = rng.random((5, 7, 3))
        src = pad_and_encode(img, 0)
        np.testing.assert_array_equal(src.data[..., :3], img)
        assert np.all(src.data[..., 3:] == 0.0)

    def test_channel_count(self):
        src = pad_and_encode(np.zeros((4, 4, 3)), 64)
        assert IMAGE_PE.output_dim(2) == 18
        assert src.data.shape == (132, 132, 21)
        assert src.channels == 21

    def test_interior_zero_and_border_replicated(self, rng):
        img = rng.random((6, 5, 3))
        p = 3
        src = pad_and_encode(img, p)
        assert np.all(src.data[p : p + 6, p : p + 5, 3:] == 0.0)
        np.testing.assert_array_equal(src.data[p : p + 6, p : p + 5, :3], img)
        np.testing.assert_array_equal(src.data[0, 0, :3], img[0, 0])
        np.testing.assert_array_equal(src.data[p + 2, -1, :3], img[2, -1])
        ring = np.ones(src.data.shape[:2], dtype=bool)
        ring[p : p + 6, p : p + 5] = False
        assert np.all(np.any(src.data[ring][:, 3:] != 0.0, axis=-1))

    def test_uv_normalised_over_canvas(self):
        src = pad_and_encode(np.zeros((2, 2, 3)), 2)
        np.testing.assert_allclose(src.data[0, 0, 3:5], [-1.0, -1.0])
        np.testing.assert_allclose(src.data[-1, -1, 3:5], [1.0, 1.0])

    def test_negative_pad(self):
        with pytest.raises(ValueError):
            pad_and_encode(np.zeros((2, 2, 3)), -1)


def _encoder_params(cfg, rng, scale=0.3):
    shapes = {}
    for i, (w, b) in enumerate(cfg.layer_shapes()):
        shapes[f"encoder.conv{i}.w"] = w
        shapes[f"encoder.conv{i}.b"] = b
    p = FieldParams(shapes)
    p.vector[:] = rng.normal(scale=scale, size=len(p))
    return p


def _conv_oracle(x, w, b):
    """Direct nested-loop 'same' convolution."""
    h, wd, cin = x.shape
    k = w.shape[0]
    r = k // 2
    out = np.zeros((h, wd, w.shape[3])) + b
    for i in range(h):
        for j in range(wd):
            for dy in range(k):
                for dx in range(k):
                    y, xx = i + dy - r, j + dx - r
                    if 0 <= y < h and 0 <= xx < wd:
                        out[i, j] += x[y, xx] @ w[dy, dx]
    return out


class TestConvEncoder:
    def test_zero_weights(self, rng):
        cfg = EncoderConfig(in_channels=7, hidden=(4,), features=3)
        p = _encoder_params(cfg, rng)
        p.vector[:] = 0.0
        p["encoder.conv1.b"][...] = [0.5, -1.0, 2.0]
        feats = encode_features(pad_and_encode(rng.random((4, 4, 3)), 0, PositionalEncodingConfig(1, 1.0, False)), p, cfg)
        np.testing.assert_array_equal(feats, np.broadcast_to([0.5, -1.0, 2.0], (4, 4, 3)))

    def test_identity_1x1(self, rng):
        cfg = EncoderConfig(in_channels=3, hidden=(), features=3, kernel_size=1)
        p = _encoder_params(cfg, rng)
        p["encoder.conv0.w"][...] = np.eye(3)[None, None]
        p["encoder.conv0.b"][...] = 0.0
        x = rng.random((1, 5, 6, 3))
        out, _ = ConvEncoder(cfg).forward(x, p)
        np.testing.assert_array_equal(out, x)

    def test_matches_loop_oracle(self, rng):
        cfg = EncoderConfig(in_channels=2, hidden=(3,), features=2)
        p = _encoder_params(cfg, rng)
        x = rng.random((5, 6, 2))
        out, _ = ConvEncoder(cfg).forward(x, p)
        h = np.tanh(_conv_oracle(x, p["encoder.conv0.w"], p["encoder.conv0.b"]))
        ref = _conv_oracle(h, p["encoder.conv1.w"], p["encoder.conv1.b"])
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    def test_shape_mismatch(self, rng):
        cfg = EncoderConfig(in_channels=4, hidden=(3,), features=2)
        p = _encoder_params(cfg, rng)
        with pytest.raises(ShapeMismatch):
            ConvEncoder(cfg).forward(np.zeros((1, 4, 4, 5)), p)
        wrong = _encoder_params(EncoderConfig(in_channels=4, hidden=(5,), features=2), rng)
        with pytest.raises(ShapeMismatch):
            ConvEncoder(cfg).forward(np.zeros((1, 4, 4, 4)), wrong)

    def test_translation_equivariance(self, rng):
        cfg = EncoderConfig(in_channels=3, hidden=(4, 4), features=2)
        p = _encoder_params(cfg, rng)
        x = rng.random((1, 12, 12, 3))
        shifted = np.roll(x, 1, axis=2)
        a, _ = ConvEncoder(cfg).forward(x, p)
        b, _ = ConvEncoder(cfg).forward(shifted, p)
        # three 3x3 layers: outputs further than 3 px from any border are unaffected
        np.testing.assert_allclose(b[:, 4:-4, 5:-4], a[:, 4:-4, 4:-5], atol=1e-12)

    def test_gradient_finite_differences(self, rng):
        cfg = EncoderConfig(in_channels=3, hidden=(3, 3), features=2)
        enc = ConvEncoder(cfg)
        p = _encoder_params(cfg, rng)
        x = rng.random((2, 5, 5, 3))
        target = rng.normal(size=(2, 5, 5, 2))

        def loss(params):
            out, _ = enc.forward(x, params)
            return float(np.sum(out * target))

        out, cache = enc.forward(x, p)
        grads = p.zeros_like()
        enc.backward(target, cache, grads)
        for idx in rng.choice(len(p), size=25, replace=False):
            h = 1e-6
            pp = p.copy()
            pp.vector[idx] += h
            lp = loss(pp)
            pp.vector[idx] -= 2 * h
            lm = loss(pp)
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads.vector[idx]) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9
