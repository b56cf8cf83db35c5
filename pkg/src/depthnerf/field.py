"""Depth-conditioned image-based radiance field with hand-written backpropagation.

Per source view ``i`` an MLP ``f1`` maps the camera-space sample position and
direction, the pixel-aligned feature vector and the encoded depth difference to
an intermediate vector.  The vectors are averaged over views and a head MLP
``f2`` regresses color (sigmoid) and density (softplus).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import (
    DEPTH_PE,
    IMAGE_PE,
    ConvEncoder,
    EncodedSourceImage,
    EncoderConfig,
    PositionalEncodingConfig,
    pad_and_encode,
    positional_encode,
)
from .errors import ShapeMismatch
from .geometry import (
    CameraView,
    bilinear_matrix,
    bilinear_sample,
    depth_valid_at,
    direction_to_camera,
    project_unchecked,
    world_to_camera,
)
from .params import FieldParams


@dataclass(frozen=True)
class FieldConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pad: int = 64
    f1_hidden: tuple[int, ...] = (64, 64, 64)
    f1_out: int = 64
    f2_hidden: tuple[int, ...] = (64, 64)
    position_pe: PositionalEncodingConfig = DEPTH_PE
    depth_pe: PositionalEncodingConfig = DEPTH_PE
    depth_conditioning: bool = True
    # meters per model length unit: depth differences are encoded in this unit
    # and densities are emitted per unit length (1e-3 = millimeters)
    length_unit: float = 1.0

    @property
    def feature_dim(self) -> int:
        return self.encoder.features

    @property
    def depth_dim(self) -> int:
        # encoded depth difference plus one validity bit
        return self.depth_pe.output_dim(1) + 1

    @property
    def f1_in(self) -> int:
        return self.position_pe.output_dim(3) + 3 + self.feature_dim + self.depth_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (w, b) in enumerate(self.encoder.layer_shapes()):
            shapes[f"encoder.conv{i}.w"] = w
            shapes[f"encoder.conv{i}.b"] = b
        for name, widths in (
            ("f1", (self.f1_in,) + tuple(self.f1_hidden) + (self.f1_out,)),
            ("f2", (self.f1_out,) + tuple(self.f2_hidden) + (4,)),
        ):
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                shapes[f"{name}.layer{i}.w"] = (a, b)
                shapes[f"{name}.layer{i}.b"] = (b,)
        return shapes


def init_params(cfg: FieldConfig, seed: int = 0, dtype=np.float64) -> FieldParams:
    """Zero biases; encoder kernels uniform(+-1/sqrt(fan_in)), MLP weights Glorot-uniform.

    The Glorot bound keeps activation variance roughly constant through the
    tanh stacks, so the head output depends on its inputs from the start.
    """
    rng = np.random.default_rng(seed)
    params = FieldParams(cfg.shapes(), dtype=dtype)
    for name, shape in params.shapes.items():
        if not name.endswith(".w"):
            continue
        fan_in = int(np.prod(shape[:-1]))
        if name.startswith("encoder."):
            bound = 1.0 / np.sqrt(fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + shape[-1]))
        params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


# --- small MLP -------------------------------------------------------------


def _mlp_layers(params, prefix):
    layers = []
    i = 0
    while f"{prefix}.layer{i}.w" in params:
        layers.append((params[f"{prefix}.layer{i}.w"], params[f"{prefix}.layer{i}.b"]))
        i += 1
    return layers


def mlp_forward(x, params, prefix):
    layers = _mlp_layers(params, prefix)
    if x.shape[-1] != layers[0][0].shape[0]:
        raise ShapeMismatch(f"{prefix}: expected input width {layers[0][0].shape[0]}, got {x.shape[-1]}")
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, (acts, layers, prefix)


def _flush_subnormals(g):
    # subnormal operands make BLAS an order of magnitude slower; they carry no useful signal
    info = np.finfo(g.dtype)
    return np.where(np.abs(g) < info.tiny / info.eps, 0.0, g).astype(g.dtype, copy=False)


def mlp_backward(dout, cache, grads):
    acts, layers, prefix = cache
    g = _flush_subnormals(dout)
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        h_in = acts[i]
        grads[f"{prefix}.layer{i}.w"] += h_in.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        grads[f"{prefix}.layer{i}.b"] += g.reshape(-1, w.shape[1]).sum(axis=0)
        g = g @ w.T
        if i > 0:
            g = _flush_subnormals(g * (1.0 - acts[i] ** 2))
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- conditioning ------------------------------------------------------------


@dataclass
class Conditioning:
    """Per-view inputs for M samples and V source views."""

    x_cam: np.ndarray  # (V, M, 3)
    d_cam: np.ndarray  # (V, M, 3)
    uv: np.ndarray  # (V, M, 2) source pixel coordinates (unpadded)
    dz: np.ndarray  # (V, M)
    dz_valid: np.ndarray  # (V, M) bool

    @property
    def n_views(self) -> int:
        return self.x_cam.shape[0]

    @property
    def n_samples(self) -> int:
        return self.x_cam.shape[1]


def delta_z(x, view: CameraView) -> tuple[float, bool]:
    """Estimated surface depth at the projection of ``x`` minus its camera z.

    Returns ``(dz, valid)``; ``valid`` is False when the point projects outside
    the depth map, lies behind the camera, or lands on pixels without depth.
    """
    dz, ok = _delta_z_batch(np.asarray(x, dtype=np.float64)[None], view)
    return float(dz[0]), bool(ok[0])


def _delta_z_batch(points, view: CameraView):
    x_cam = world_to_camera(points, view)
    uv, z, in_front = project_unchecked(x_cam, view.K)
    dz, ok = _dz_from_projection(uv, z, in_front, view)
    return dz, ok


def _dz_from_projection(uv, z, in_front, view):
    h, w = view.depth.shape
    inside = (
        in_front & (uv[..., 0] >= 0) & (uv[..., 0] <= w - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= h - 1)
    )
    ok = inside & depth_valid_at(view.depth, uv)
    dz = np.where(ok, bilinear_sample(view.depth, uv) - z, 0.0)
    return dz, ok


def compute_conditioning(points, dirs, views: list[CameraView], dtype=np.float64) -> Conditioning:
    """Transform M world samples (and their ray directions) into every source view."""
    points = np.asarray(points, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    xs, ds, uvs, dzs, oks = [], [], [], [], []
    for view in views:
        x_cam = world_to_camera(points, view)
        uv, z, in_front = project_unchecked(x_cam, view.K)
        dz, ok = _dz_from_projection(uv, z, in_front, view)
        xs.append(x_cam)
        ds.append(direction_to_camera(dirs, view))
        uvs.append(uv)
        dzs.append(dz)
        oks.append(ok)
    return Conditioning(
        np.stack(xs).astype(dtype),
        np.stack(ds).astype(dtype),
        np.stack(uvs),
        np.stack(dzs).astype(dtype),
        np.stack(oks),
    )


def depth_features(dz, valid, cfg: FieldConfig) -> np.ndarray:
    """Encoded depth difference with a trailing validity bit; zeros when disabled or invalid."""
    dz = np.asarray(dz)
    valid = np.asarray(valid)
    out = np.zeros(dz.shape + (cfg.depth_dim,), dtype=dz.dtype)
    if cfg.depth_conditioning:
        enc = positional_encode(dz[..., None] / cfg.length_unit, cfg.depth_pe)
        out[..., :-1] = np.where(valid[..., None], enc, 0.0)
        out[..., -1] = valid
    return out


def f1_inputs(x_cam, d_cam, omega, dz, dz_valid, cfg: FieldConfig) -> np.ndarray:
    omega = np.asarray(omega)
    if omega.shape[-1] != cfg.feature_dim:
        raise ShapeMismatch(f"feature vector has {omega.shape[-1]} channels, expected {cfg.feature_dim}")
    parts = [
        positional_encode(np.asarray(x_cam), cfg.position_pe),
        np.asarray(d_cam),
        omega,
        depth_features(dz, dz_valid, cfg),
    ]
    return np.concatenate([p.astype(omega.dtype, copy=False) for p in parts], axis=-1)


def f1_forward(x_cam, d_cam, omega, dz, dz_valid, params, cfg: FieldConfig) -> np.ndarray:
    """Intermediate feature vector(s) for a single source view."""
    out, _ = mlp_forward(f1_inputs(x_cam, d_cam, omega, dz, dz_valid, cfg), params, "f1")
    return out


def f2_head(out, cfg: FieldConfig):
    rgb = _sigmoid(out[..., :3])
    sigma = np.logaddexp(0.0, out[..., 3]) / cfg.length_unit
    return rgb, sigma


def f2_forward(v_set, params, cfg: FieldConfig):
    """Pool (N, ..., H) per-view vectors by their mean and regress ``(rgb, sigma)``."""
    v_set = np.asarray(v_set)
    out, _ = mlp_forward(v_set.mean(axis=0), params, "f2")
    return f2_head(out, cfg)


# --- full field --------------------------------------------------------------


class RadianceField:
    """Batched forward/backward over encoder, f1 and f2."""

    def __init__(self, cfg: FieldConfig):
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg.encoder)

    def encode(self, sources, params):
        """Feature maps for a (V, Hc, Wc, C) stack of padded, encoded source images."""
        return self.encoder.forward(sources, params)

    def forward(self, cond: Conditioning, feats, params):
        cfg = self.cfg
        n_views, m = cond.n_views, cond.n_samples
        _, hc, wc, nf = feats.shape
        uv = cond.uv.reshape(-1, 2) + cfg.pad
        offsets = np.repeat(np.arange(n_views), m)
        smat = bilinear_matrix((hc, wc), uv, offsets, n_maps=n_views)
        if smat.dtype != feats.dtype:
            smat = smat.astype(feats.dtype)
        omega = (smat @ feats.reshape(-1, nf)).reshape(n_views, m, nf)
        x = f1_inputs(cond.x_cam, cond.d_cam, omega, cond.dz, cond.dz_valid, cfg)
        v, c1 = mlp_forward(x, params, "f1")
        pooled = v.mean(axis=0)
        out, c2 = mlp_forward(pooled, params, "f2")
        rgb, sigma = f2_head(out, cfg)
        cache = (smat, feats.shape, c1, c2, out, n_views)
        return rgb, sigma, cache

    def backward(self, drgb, dsigma, cache, grads):
        """Accumulate parameter gradients; returns the gradient w.r.t. the feature maps."""
        smat, fshape, c1, c2, out, n_views = cache
        s = _sigmoid(out[..., :3])
        dout = np.empty_like(out)
        dout[..., :3] = drgb * s * (1.0 - s)
        dout[..., 3] = dsigma * _sigmoid(out[..., 3]) / self.cfg.length_unit
        dpooled = mlp_backward(dout, c2, grads)
        dv = np.repeat((dpooled / n_views)[None], n_views, axis=0)
        dx = mlp_backward(dv, c1, grads)
        start = self.cfg.position_pe.output_dim(3) + 3
        domega = dx[..., start : start + fshape[-1]]
        dfeats = smat.T @ domega.reshape(-1, fshape[-1])
        return np.asarray(dfeats).reshape(fshape)


def prepare_sources(views: list[CameraView], cfg: FieldConfig):
    """Stack the padded, offset-encoded source images of all views."""
    encoded = [pad_and_encode(v.image, cfg.pad, IMAGE_PE).data for v in views]
    return np.stack(encoded)


def attach_features(views: list[CameraView], params: FieldParams, cfg: FieldConfig) -> list[CameraView]:
    """Copies of ``views`` carrying their encoder feature maps."""
    feats, _ = RadianceField(cfg).encode(prepare_sources(views, cfg), params)
    return [replace(v, features=feats[i], feature_pad=cfg.pad) for i, v in enumerate(views)]


def field_eval(x, d, views: list[CameraView], params: FieldParams, cfg: FieldConfig):
    """Color and density at world points ``x`` (..., 3) seen along directions ``d``.

    ``views`` must carry feature maps (see :func:`attach_features`).
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), x.shape)
    lead = x.shape[:-1]
    cond = compute_conditioning(x.reshape(-1, 3), d.reshape(-1, 3), views)
    feats = np.stack([v.features for v in views])
    rgb, sigma, _ = RadianceField(cfg).forward(cond, feats, params)
    return rgb.reshape(lead + (3,)), sigma.reshape(lead)


def analytic_field_eval(x, d, scene):
    """Ground-truth color and density of a synthetic scene (direction is ignored)."""
    return scene.radiance(np.asarray(x, dtype=np.float64))


__all__ = [
    "Conditioning",
    "EncodedSourceImage",
    "FieldConfig",
    "RadianceField",
    "analytic_field_eval",
    "attach_features",
    "compute_conditioning",
    "delta_z",
    "f1_forward",
    "f2_forward",
    "field_eval",
    "init_params",
    "prepare_sources",
]
