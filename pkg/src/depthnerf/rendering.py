"""Discrete volume rendering, image assembly, ground-truth depth and image files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import LengthMismatch
from .geometry import CameraView, pixel_directions, pixel_grid
from .parallel import map_chunks
from .sampling import SampleSet, ray_rng, segment_lengths
from .scene import render_depth

MAX_OPTICAL_DEPTH = 80.0
MIN_ALPHA_FOR_DEPTH = 1e-6


@dataclass
class RayResult:
    color: np.ndarray
    alpha: float
    expected_depth: float  # nan when alpha < 1e-6


def composite(sigma, rgb, deltas, ts=None):
    """Batched alpha compositing along the last sample axis.

    Returns ``(color, alpha, depth, weights, cache)``; ``depth`` is nan where
    the accumulated alpha is negligible.
    """
    tau_raw = sigma * deltas
    tau = np.minimum(tau_raw, MAX_OPTICAL_DEPTH)
    excl = np.cumsum(tau, axis=-1) - tau
    trans = np.exp(-excl)
    absorb = -np.expm1(-tau)
    w = trans * absorb
    color = np.einsum("...s,...sc->...c", w, rgb)
    alpha = np.sum(w, axis=-1)
    depth = None
    if ts is not None:
        with np.errstate(invalid="ignore", divide="ignore"):
            depth = np.where(alpha >= MIN_ALPHA_FOR_DEPTH, np.sum(w * ts, axis=-1) / alpha, np.nan)
    cache = (trans, tau, tau_raw <= MAX_OPTICAL_DEPTH, w, rgb, deltas)
    return color, alpha, depth, w, cache


def composite_backward(dcolor, cache, dalpha=None):
    """Gradients of the composite w.r.t. ``sigma`` and ``rgb``.

    ``dalpha`` is the upstream gradient on alpha (e.g. ``-dcolor . bg`` when a
    background is blended behind the ray).
    """
    trans, tau, unclamped, w, rgb, deltas = cache
    drgb = w[..., None] * dcolor[..., None, :]
    # dC/dtau_j = T_{j+1} c_j - sum_{k>j} w_k c_k ;  dalpha/dtau_j = T_{N+1}
    g_c = np.einsum("...sc,...c->...s", rgb, dcolor)
    wc = w * g_c
    after = np.flip(np.cumsum(np.flip(wc, -1), -1), -1) - wc
    trans_next = trans * np.exp(-tau)
    dtau = trans_next * g_c - after
    if dalpha is not None:
        t_end = trans_next[..., -1:]
        dtau = dtau + dalpha[..., None] * t_end
    dsigma = np.where(unclamped, dtau * deltas, 0.0)
    return dsigma, drgb


def integrate_ray(samples: SampleSet, rgb, sigma) -> RayResult:
    """Volume-render one ray from its samples and per-sample radiance."""
    rgb = np.asarray(rgb, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if rgb.shape[0] != len(samples) or sigma.shape[0] != len(samples):
        raise LengthMismatch(f"{len(samples)} samples but {rgb.shape[0]} colors / {sigma.shape[0]} densities")
    color, alpha, depth, _, _ = composite(sigma, rgb, samples.deltas, samples.ts)
    return RayResult(color, float(alpha), float(depth))


@dataclass
class RenderConfig:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk: int = 1024
    threads: int = 1


@dataclass
class RenderOutput:
    image: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


def render_rays(origins, dirs, t_near, t_far, radiance: Callable, sampler: Callable, rng, background=(0, 0, 0)):
    """Render M rays: ``sampler(o, d, near, far, rng) -> ts`` and ``radiance(points, dirs) -> (rgb, sigma)``."""
    m = dirs.shape[0]
    near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (m,))
    far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (m,))
    ts = sampler(origins, dirs, near, far, rng)
    deltas = segment_lengths(ts, far)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    rgb, sigma = radiance(pts.reshape(-1, 3), np.repeat(dirs, ts.shape[1], axis=0))
    rgb = rgb.reshape(ts.shape + (3,))
    sigma = sigma.reshape(ts.shape)
    color, alpha, depth, _, _ = composite(sigma, rgb, deltas, ts)
    color = color + (1.0 - alpha)[:, None] * np.asarray(background, dtype=np.float64)
    return color, alpha, depth


def render_image(
    target: CameraView,
    t_near,
    t_far,
    radiance: Callable,
    sampler: Callable,
    seed: int = 0,
    cfg: Optional[RenderConfig] = None,
) -> RenderOutput:
    """Render every pixel of ``target``.

    Pixels are processed in fixed-size chunks, each with its own counter-based
    random stream, so output does not depend on the thread count.
    """
    cfg = cfg or RenderConfig()
    h, w = target.height, target.width
    dirs = pixel_directions(target, pixel_grid(h, w)).reshape(-1, 3)
    origins = np.broadcast_to(target.center, dirs.shape)
    n = dirs.shape[0]
    starts = list(range(0, n, cfg.chunk))

    def work(k):
        s = starts[k]
        e = min(s + cfg.chunk, n)
        return render_rays(
            origins[s:e], dirs[s:e], t_near, t_far, radiance, sampler, ray_rng(seed, 1, k), cfg.background
        )

    parts = map_chunks(work, len(starts), cfg.threads)
    color = np.concatenate([p[0] for p in parts]).reshape(h, w, 3)
    alpha = np.concatenate([p[1] for p in parts]).reshape(h, w)
    depth = np.concatenate([p[2] for p in parts]).reshape(h, w)
    return RenderOutput(color, alpha, depth)


# Smallest depth std reported for synthetic depth (m).  Much below the default
# candidate spacing (about 0.6 mm at desk scale) the likelihood lands on one or
# two candidates per view and the shortlist fills with zero-likelihood ones.
DEPTH_STD_FLOOR = 1e-3


def render_gt_depth(view: CameraView, scene, noise_std: float = 0.0, rng=None, std_floor: float = DEPTH_STD_FLOOR):
    """Analytic first-surface depth and its std map; optional Gaussian perturbation.

    Misses carry depth 0 (invalid).  The std map is ``max(noise_std, std_floor)``
    everywhere so likelihoods stay well defined for exact depth.
    """
    depth = render_depth(view, scene)
    if noise_std > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = rng.normal(0.0, noise_std, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)
    std = np.full(depth.shape, max(noise_std, std_floor))
    return depth, std


# --- image files ----------------------------------------------------------------


def quantize8(img) -> np.ndarray:
    """[0,1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img) -> None:
    img = np.asarray(img)
    h, w = img.shape[:2]
    data = quantize8(img.reshape(h, w, 3))
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = _pnm_header(raw, 4)
    magic, w, h, maxval = fields
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: unsupported PPM")
    w, h = int(w), int(h)
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm16(path, values, lo: float, hi: float) -> None:
    """16-bit PGM with ``value = lo + code / 65535 * (hi - lo)``; nan maps to 0.

    The mapping is written to ``<path>.txt`` next to the image.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((np.nan_to_num(values, nan=lo) - lo) / span, 0.0, 1.0)
    codes = np.floor(scaled * 65535.0 + 0.5).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + codes.tobytes())
    Path(str(path) + ".txt").write_text(
        f"encoding: linear\nvalue = {lo!r} + code / 65535 * ({hi!r} - {lo!r})\nnan_or_missing: code 0\n"
    )


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = _pnm_header(raw, 4)
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def _pnm_header(raw: bytes, n: int):
    fields = []
    pos = 0
    while len(fields) < n:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    return fields, pos + 1

