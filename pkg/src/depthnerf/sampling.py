"""Ray sampling: depth-guided candidate shortlisting with Gaussian boosting, and
the stratified coarse-to-fine baseline.

Every public routine has a single-ray form matching the documented contract and
a ``*_batch`` form operating on (M, ...) arrays of rays, which is what the
renderer and the experiments use.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateWeights
from .geometry import CameraView, NormalMap, Ray, _bilinear_corners, depth_to_normals, project_unchecked


@dataclass(frozen=True)
class SamplingConfig:
    n_cand: int = 1000
    n_shortlist: int = 25
    n_gauss: int = 15
    backface: bool = True
    jitter: bool = True

    @property
    def n_total(self) -> int:
        return self.n_shortlist + self.n_gauss

    def with_budget(self, n_total: int) -> "SamplingConfig":
        """A different per-ray budget: the boost count stays fixed, the shortlist absorbs the rest."""
        n_gauss = min(self.n_gauss, n_total)
        return replace(self, n_shortlist=n_total - n_gauss, n_gauss=n_gauss)


@dataclass
class SampleSet:
    ts: np.ndarray
    deltas: np.ndarray
    per_view_p: np.ndarray  # (N, n)
    pooled_p: np.ndarray
    p_oa: np.ndarray

    def __len__(self):
        return self.ts.size


def ray_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based stream keyed by ``seed`` and e.g. (purpose, chunk index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counters])))


def segment_lengths(ts, t_far) -> np.ndarray:
    """Distances to the next sample; the last segment ends at ``t_far``."""
    ts = np.asarray(ts)
    far = np.asarray(t_far, dtype=ts.dtype)
    last = np.reshape(far, far.shape + (1,)) - ts[..., -1:]
    return np.concatenate([np.diff(ts, axis=-1), last], axis=-1)


def stratified(t_near, t_far, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``n`` ascending samples, one per equal stratum; midpoints when ``rng`` is None."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    step = (t_far - t_near) / n
    shape = t_near.shape + (n,)
    offs = 0.5 if rng is None else rng.random(shape)
    return t_near[..., None] + (np.arange(n) + offs) * step[..., None]


def uniform_candidates(ray: Ray, n_cand: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return stratified(ray.t_near, ray.t_far, n_cand, rng)


# --- surface likelihoods -------------------------------------------------------


def interval_probability(z, mu, sigma, delta) -> np.ndarray:
    """Mass of N(mu, sigma^2) inside [z - delta/2, z + delta/2].

    Depends on ``|z - mu|`` only, so it is exactly symmetric about ``mu``, and
    it is evaluated on the tail that avoids cancellation, so tiny probabilities
    keep full relative precision.
    """
    z, mu, sigma, delta = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (z, mu, sigma, delta)))
    dist = np.abs(z - mu)
    a = (dist - 0.5 * delta) / sigma
    b = (dist + 0.5 * delta) / sigma
    upper = a > 0
    return np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def _gather(flat, idx, wts):
    return np.einsum("...k,...kc->...c", wts, flat[idx])


def view_likelihoods(points, dirs, view: CameraView, delta, backface: bool = True) -> np.ndarray:
    """Surface likelihoods of world points (..., 3) against one view's depth.

    ``dirs`` (broadcastable to ``points``) are the ray directions used for
    backface culling; ``delta`` broadcasts against ``points[..., 0]``.
    """
    points = np.asarray(points, dtype=np.float64)
    x_cam = points @ view.R.T + view.t
    uv, z, in_front = project_unchecked(x_cam, view.K)
    h, w = view.depth.shape
    inside = in_front & (uv[..., 0] >= 0) & (uv[..., 0] <= w - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= h - 1)
    idx, wts = _bilinear_corners((h, w), uv)
    used = wts > 0
    depth_flat = view.depth.reshape(-1)
    valid = inside & np.all((depth_flat[idx] > 0) | ~used, axis=-1)
    mu = np.einsum("...k,...k->...", wts, depth_flat[idx])
    sig = np.einsum("...k,...k->...", wts, view.depth_std.reshape(-1)[idx])
    sig = np.where(valid, sig, 1.0)
    p = np.where(valid, interval_probability(z, mu, sig, delta), 0.0)
    if backface:
        normals = view.normals if view.normals is not None else depth_to_normals(view)
        d_cam = np.asarray(dirs, dtype=np.float64) @ view.R.T
        discard = _backface(d_cam, idx, wts, used, normals)
        p = np.where(discard, 0.0, p)
    return p


def _backface(d_cam, idx, wts, used, normals: NormalMap):
    n_flat = normals.normals.reshape(-1, 3)
    v_flat = normals.valid.reshape(-1)
    n = _gather(n_flat, idx, wts)
    norm = np.linalg.norm(n, axis=-1)
    n_ok = np.all(v_flat[idx] | ~used, axis=-1) & (norm > 1e-12)
    dots = np.sum(np.broadcast_to(d_cam, n.shape) * n, axis=-1) / np.where(norm > 0, norm, 1.0)
    return n_ok & (dots > 0.0)


def surface_likelihood(x, view: CameraView, delta: float) -> float:
    """Likelihood of world point ``x`` being on the surface seen by ``view`` (no culling)."""
    return float(view_likelihoods(np.asarray(x, dtype=np.float64)[None], None, view, delta, backface=False)[0])


def backface_cull(x, ray_dir, view: CameraView, normals: NormalMap) -> bool:
    """True (discard) when the ray and the depth-map normal at ``x`` form an angle below 90 degrees."""
    x_cam = np.asarray(x, dtype=np.float64) @ view.R.T + view.t
    uv, _, _ = project_unchecked(x_cam[None], view.K)
    idx, wts = _bilinear_corners(normals.valid.shape, uv)
    d_cam = np.asarray(ray_dir, dtype=np.float64) @ view.R.T
    return bool(_backface(d_cam[None], idx, wts, wts > 0, normals)[0])


def pool_likelihoods(per_view_p) -> np.ndarray:
    return np.max(np.asarray(per_view_p), axis=0)


def shortlist(ts, pooled_p, n_shortlist: int) -> np.ndarray:
    """The ``n_shortlist`` most likely candidates in ascending t; ties favour smaller t."""
    ts = np.asarray(ts)
    order = np.argsort(-np.asarray(pooled_p), axis=-1, kind="stable")[..., :n_shortlist]
    return np.take_along_axis(ts, np.sort(order, axis=-1), axis=-1)


def occlusion_aware(ts, pooled_p) -> np.ndarray:
    """Probability of terminating at each sample: ``p_j * prod_{k<j} (1 - p_k)``.

    ``ts`` must be ascending; it only fixes the order of the likelihoods.
    """
    p = np.asarray(pooled_p, dtype=np.float64)
    survive = np.cumprod(1.0 - p, axis=-1)
    before = np.concatenate([np.ones(p.shape[:-1] + (1,)), survive[..., :-1]], axis=-1)
    return p * before


def fit_gaussian(ts, p_oa) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moment-matched mean and std of the termination weights; third output flags usable rows."""
    ts = np.asarray(ts, dtype=np.float64)
    total = np.sum(p_oa, axis=-1)
    ok = total >= 1e-12
    w = p_oa / np.where(ok, total, 1.0)[..., None]
    mu = np.sum(w * ts, axis=-1)
    var = np.sum(w * (ts - mu[..., None]) ** 2, axis=-1)
    return mu, np.sqrt(np.maximum(var, 0.0)), ok


def gaussian_boost(
    ts,
    p_oa,
    n_gauss: int,
    rng: np.random.Generator,
    t_near: Optional[float] = None,
    t_far: Optional[float] = None,
    sigma_floor: Optional[float] = None,
) -> np.ndarray:
    """Extra samples drawn from the Gaussian fitted to the termination weights.

    The std is floored at ``sigma_floor`` (default: the candidate spacing) and
    draws are clamped to ``[t_near, t_far]`` (default: the candidate range).
    """
    ts = np.asarray(ts, dtype=np.float64)
    mu, sd, ok = fit_gaussian(ts, np.asarray(p_oa, dtype=np.float64))
    if not ok:
        raise DegenerateWeights("occlusion-aware likelihoods sum to zero")
    if sigma_floor is None:
        sigma_floor = float(np.median(np.diff(ts))) if ts.size > 1 else 0.0
    lo = ts[0] if t_near is None else t_near
    hi = ts[-1] if t_far is None else t_far
    sd = max(float(sd), sigma_floor)
    return np.clip(mu + sd * rng.standard_normal(n_gauss), lo, hi)


# --- full samplers --------------------------------------------------------------


def depth_guided_batch(origins, dirs, t_near, t_far, views: list[CameraView], cfg: SamplingConfig, rng):
    """Depth-guided sample positions for M rays.

    Returns ``(ts, fallback)``: ascending (M, n_shortlist + n_gauss) ray
    parameters and a mask of rays that had no depth evidence and received
    stratified samples instead.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = dirs.shape[0]
    near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (m,))
    far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (m,))
    cand = stratified(near, far, cfg.n_cand, rng if cfg.jitter else None)
    delta = (far - near) / cfg.n_cand
    pts = origins[:, None, :] + cand[..., None] * dirs[:, None, :]
    pooled = np.zeros_like(cand)
    for view in views:
        p = view_likelihoods(pts, dirs[:, None, :], view, delta[:, None], cfg.backface)
        np.maximum(pooled, p, out=pooled)

    short = shortlist(cand, pooled, cfg.n_shortlist)
    p_oa = occlusion_aware(cand, pooled)
    mu, sd, ok = fit_gaussian(cand, p_oa)
    sd = np.maximum(sd, delta)
    boost = np.clip(mu[:, None] + sd[:, None] * rng.standard_normal((m, cfg.n_gauss)), near[:, None], far[:, None])
    ts = np.sort(np.concatenate([short, boost], axis=-1), axis=-1)
    if not np.all(ok):
        bad = ~ok
        ts[bad] = stratified(near[bad], far[bad], cfg.n_total, rng if cfg.jitter else None)
    return ts, ~ok


def inverse_cdf(edges, weights, n: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Draw ``n`` sorted samples per row from a piecewise-constant density.

    ``edges`` (M, B+1) and ``weights`` (M, B); rows with zero total weight fall
    back to uniform weights.  Quantiles are stratified, one per equal slice of
    [0, 1), and ``rng=None`` takes the slice midpoints.
    """
    edges = np.asarray(edges, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    m, nb = w.shape
    total = w.sum(axis=-1, keepdims=True)
    w = np.where(total >= 1e-12, w, 1.0)
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((m, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (m, n))
    else:
        u = (np.arange(n) + rng.random((m, n))) / n
    # per-row searchsorted via row offsets
    offs = 2.0 * np.arange(m)[:, None]
    idx = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(m, n)
    idx = idx - (nb + 1) * np.arange(m)[:, None] - 1
    idx = np.clip(idx, 0, nb - 1)
    # skip zero-mass bins that searchsorted may land on at exact cdf ties
    c0 = np.take_along_axis(cdf, idx, axis=-1)
    pb = np.take_along_axis(pdf, idx, axis=-1)
    frac = np.where(pb > 0, (u - c0) / np.where(pb > 0, pb, 1.0), 0.5)
    lo = np.take_along_axis(edges, idx, axis=-1)
    hi = np.take_along_axis(edges, idx + 1, axis=-1)
    return lo + np.clip(frac, 0.0, 1.0) * (hi - lo)


def volume_weights(sigma, deltas) -> np.ndarray:
    tau = np.minimum(sigma * deltas, 80.0)
    trans = np.exp(-np.concatenate([np.zeros(tau.shape[:-1] + (1,)), np.cumsum(tau, axis=-1)[..., :-1]], axis=-1))
    return trans * (1.0 - np.exp(-tau))


def coarse_to_fine_batch(origins, dirs, t_near, t_far, n_total: int, coarse_density: Callable, rng):
    """Half the budget stratified, the rest importance-sampled from the coarse weights."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = dirs.shape[0]
    near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (m,))
    far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (m,))
    n_coarse = n_total // 2
    n_fine = n_total - n_coarse
    tc = stratified(near, far, n_coarse, rng)
    pts = origins[:, None, :] + tc[..., None] * dirs[:, None, :]
    sigma = np.asarray(coarse_density(pts), dtype=np.float64)
    w = volume_weights(sigma, segment_lengths(tc, far))
    edges = near[:, None] + (far - near)[:, None] * np.arange(n_coarse + 1) / n_coarse
    tf = inverse_cdf(edges, w, n_fine, rng)
    return np.sort(np.concatenate([tc, tf], axis=-1), axis=-1)


def _sample_set(ts, t_far, views, delta, backface=False, origin=None, direction=None):
    ts = np.asarray(ts, dtype=np.float64)
    keep = np.concatenate([[True], np.diff(ts) > 1e-9])
    ts = ts[keep]
    deltas = segment_lengths(ts, t_far)
    if views:
        pts = origin + ts[:, None] * direction
        per_view = np.stack([view_likelihoods(pts, direction, v, delta, backface) for v in views])
    else:
        per_view = np.zeros((0, ts.size))
    pooled = pool_likelihoods(per_view) if len(per_view) else np.zeros(ts.size)
    return SampleSet(ts, deltas, per_view, pooled, occlusion_aware(ts, pooled))


def depth_guided_samples(ray: Ray, views: list[CameraView], cfg: SamplingConfig, rng) -> SampleSet:
    ts, _ = depth_guided_batch(ray.origin[None], ray.direction[None], ray.t_near, ray.t_far, views, cfg, rng)
    delta = (ray.t_far - ray.t_near) / cfg.n_cand
    return _sample_set(ts[0], ray.t_far, views, delta, backface=cfg.backface, origin=ray.origin, direction=ray.direction)


def coarse_to_fine_samples(ray: Ray, n_total: int, coarse_field: Callable, rng) -> SampleSet:
    """``coarse_field`` maps world points (..., 3) to densities (...)."""
    ts = coarse_to_fine_batch(ray.origin[None], ray.direction[None], ray.t_near, ray.t_far, n_total, coarse_field, rng)
    return _sample_set(ts[0], ray.t_far, [], 0.0)
