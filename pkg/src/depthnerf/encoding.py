"""Positional encodings, padded source images and the convolutional feature encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True)
class PositionalEncodingConfig:
    num_frequencies: int = 6
    base_frequency: float = 1.0
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (1 if self.include_input else 0) + input_dim * 2 * self.num_frequencies


# Offset channels added to padded source images: raw uv plus 4 octaves from 0.5.
IMAGE_PE = PositionalEncodingConfig(num_frequencies=4, base_frequency=0.5, include_input=True)
# Depth-difference and camera-space position encodings: 6 octaves from 1 per length unit.
DEPTH_PE = PositionalEncodingConfig(num_frequencies=6, base_frequency=1.0, include_input=True)


def positional_encode(x, cfg: PositionalEncodingConfig) -> np.ndarray:
    """Encode the last axis of ``x`` with sin/cos pairs at octave-spaced frequencies.

    Output layout per input dimension ``k`` and frequency ``j``: ``[sin, cos]``
    at ``2*pi*base*2**j*x_k``, preceded by the raw input when ``include_input``.
    """
    x = np.asarray(x)
    if x.ndim == 0:
        x = x[None]
    freqs = cfg.base_frequency * 2.0 ** np.arange(cfg.num_frequencies)
    phase = 2.0 * np.pi * x[..., :, None] * freqs  # (..., k, L)
    enc = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (..., k, L, 2)
    enc = enc.reshape(x.shape[:-1] + (-1,))
    if cfg.include_input:
        return np.concatenate([x, enc], axis=-1)
    return enc


@dataclass
class EncodedSourceImage:
    data: np.ndarray  # (H + 2p, W + 2p, 3 + gamma channels)
    pad: int

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def pad_and_encode(image, pad: int, cfg: PositionalEncodingConfig = IMAGE_PE) -> EncodedSourceImage:
    """Border-replicate an RGB image and append offset encodings for the padded ring."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    rgb = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    hc, wc = h + 2 * pad, w + 2 * pad
    v, u = np.mgrid[0:hc, 0:wc].astype(np.float64)
    un = 2.0 * u / max(wc - 1, 1) - 1.0
    vn = 2.0 * v / max(hc - 1, 1) - 1.0
    gamma = positional_encode(np.stack([un, vn], axis=-1), cfg)
    gamma[pad : pad + h, pad : pad + w] = 0.0
    return EncodedSourceImage(np.concatenate([rgb, gamma], axis=-1), pad)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3 + IMAGE_PE.output_dim(2)
    hidden: tuple[int, ...] = (32, 32)
    features: int = 32
    kernel_size: int = 3

    def layer_shapes(self):
        widths = (self.in_channels,) + tuple(self.hidden) + (self.features,)
        k = self.kernel_size
        return [((k, k, cin, cout), (cout,)) for cin, cout in zip(widths[:-1], widths[1:])]


def _conv_forward(x, w, b):
    """'Same' zero-padded stride-1 convolution, NHWC input, (k, k, Cin, Cout) kernel."""
    n, h, wd, _ = x.shape
    k = w.shape[0]
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.broadcast_to(b, (n, h, wd, w.shape[3])).copy()
    for dy in range(k):
        for dx in range(k):
            out += xp[:, dy : dy + h, dx : dx + wd, :] @ w[dy, dx]
    return out


def _conv_backward(dout, x, w, need_dx: bool = True):
    n, h, wd, cin = x.shape
    k = w.shape[0]
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    d2 = dout.reshape(-1, dout.shape[-1])
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, dy : dy + h, dx : dx + wd, :]
            dw[dy, dx] = patch.reshape(-1, cin).T @ d2
            if need_dx:
                dxp[:, dy : dy + h, dx : dx + wd, :] += dout @ w[dy, dx].T
    db = d2.sum(axis=0)
    return dxp[:, r : r + h, r : r + wd, :], dw, db


class ConvEncoder:
    """Stack of same-size convolutions with tanh between layers and a linear head.

    Weights are read from ``params`` (any mapping from name to array) under
    ``encoder.conv{i}.w`` / ``encoder.conv{i}.b``.
    """

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    def _layers(self, params):
        layers = []
        for i, (wshape, bshape) in enumerate(self.cfg.layer_shapes()):
            w = params[f"encoder.conv{i}.w"]
            b = params[f"encoder.conv{i}.b"]
            if w.shape != wshape or b.shape != bshape:
                raise ShapeMismatch(
                    f"encoder layer {i}: expected {wshape}/{bshape}, got {w.shape}/{b.shape}"
                )
            layers.append((w, b))
        return layers

    def forward(self, x, params):
        """Map (N, H, W, C) inputs to (N, H, W, F) features; returns ``(features, cache)``."""
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[-1] != self.cfg.in_channels:
            raise ShapeMismatch(f"encoder expects {self.cfg.in_channels} channels, got {x.shape[-1]}")
        layers = self._layers(params)
        inputs = []
        h = x
        for i, (w, b) in enumerate(layers):
            inputs.append(h)
            h = _conv_forward(h, w, b)
            if i < len(layers) - 1:
                h = np.tanh(h)
        return h, (inputs, layers)

    def backward(self, dout, cache, grads) -> None:
        """Accumulate parameter gradients for upstream gradient ``dout`` into ``grads``."""
        inputs, layers = cache
        g = dout
        for i in reversed(range(len(layers))):
            w, _ = layers[i]
            x = inputs[i]
            dx, dw, db = _conv_backward(g, x, w, need_dx=i > 0)
            grads[f"encoder.conv{i}.w"] += dw
            grads[f"encoder.conv{i}.b"] += db
            if i > 0:
                g = dx * (1.0 - x * x)  # x is tanh output of the previous layer


def encode_features(src: EncodedSourceImage, params, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Feature map for one encoded source image, same spatial size as its canvas."""
    cfg = cfg or EncoderConfig(in_channels=src.channels)
    feats, _ = ConvEncoder(cfg).forward(src.data, params)
    return feats[0]
