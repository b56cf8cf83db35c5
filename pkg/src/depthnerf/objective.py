"""Training losses (pixel l1, anti-bias l1 on pooled patches, optional perceptual hook) and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ShapeMismatch

# (prediction, target) -> (value, gradient w.r.t. prediction)
PerceptualHook = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]

# Weight used with a perceptual hook in the reference setup; the shipped default is 0.
REFERENCE_VGG_WEIGHT = 0.1


@dataclass(frozen=True)
class ObjectiveConfig:
    w_l1: float = 1.0
    w_vgg: float = 0.0
    w_ab: float = 5.0
    ab_downsample_k: int = 8
    patch_size: int = 64

    def __post_init__(self):
        if min(self.w_l1, self.w_vgg, self.w_ab) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.patch_size % self.ab_downsample_k:
            raise ValueError("patch_size must be divisible by ab_downsample_k")


def _check(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return pred, target


def avg_pool(x, k: int) -> np.ndarray:
    """k x k average pooling over the two spatial axes of (..., H, W, C)."""
    *lead, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"spatial size {h}x{w} not divisible by {k}")
    return x.reshape(*lead, h // k, k, w // k, k, c).mean(axis=(-4, -2))


def loss_l1(pred, target) -> float:
    pred, target = _check(pred, target)
    return float(np.mean(np.abs(pred - target)))


def loss_anti_bias(pred, target, k: int = 8) -> float:
    pred, target = _check(pred, target)
    return float(np.mean(np.abs(avg_pool(pred, k) - avg_pool(target, k))))


def total_loss(pred, target, cfg: ObjectiveConfig = ObjectiveConfig(), vgg_hook: Optional[PerceptualHook] = None):
    """Weighted objective and its gradient w.r.t. ``pred``.

    ``pred``/``target`` are (..., H, W, C) patches.  The l1 subgradient at a tie is 0.
    """
    pred, target = _check(pred, target)
    diff = pred - target
    loss = cfg.w_l1 * float(np.mean(np.abs(diff)))
    grad = cfg.w_l1 * np.sign(diff) / diff.size
    if cfg.w_ab > 0:
        k = cfg.ab_downsample_k
        pdiff = avg_pool(pred, k) - avg_pool(target, k)
        loss += cfg.w_ab * float(np.mean(np.abs(pdiff)))
        gp = cfg.w_ab * np.sign(pdiff) / pdiff.size / (k * k)
        # every pixel of a window receives the pooled gradient
        grad = grad + np.repeat(np.repeat(gp, k, axis=-3), k, axis=-2)
    if vgg_hook is not None and cfg.w_vgg > 0:
        value, g = vgg_hook(pred, target)
        loss += cfg.w_vgg * float(value)
        grad = grad + cfg.w_vgg * np.asarray(g)
    return loss, grad


# --- metrics ----------------------------------------------------------------------


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' filtering of an (H, W, C) image."""
    k = g.size
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i : h - k + 1 + i] for i in range(k))
    return sum(g[i] * rows[:, i : w - k + 1 + i] for i in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM with a Gaussian window over all valid window positions and channels."""
    a, b = _check(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ShapeMismatch(f"image {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gaussian_window(window, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(mse: float) -> float:
    return 99.0 if mse < 1e-10 else -10.0 * math.log10(mse)


def metrics(pred, target) -> dict[str, float]:
    pred, target = _check(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    l2 = float(np.mean(diff**2))
    return {
        "L1": float(np.mean(np.abs(diff))),
        "L2": l2,
        "PSNR": psnr(l2),
        "SSIM": ssim(pred, target),
    }
