"""Pinhole cameras, rays, projections, bilinear lookups and depth-map normals.

Convention: right-handed camera frame looking down +z, image u to the right and
v downwards, pixel centers at integer coordinates.  Extrinsics map world to
camera: ``x_cam = R @ x_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import NonPositiveDepth

_MIN_DEPTH = 1e-9


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), camera space
    valid: np.ndarray  # (H, W) bool


@dataclass
class CameraView:
    """One posed source view.

    ``depth`` stores camera-space z; pixels without a surface hold 0 and are
    treated as invalid.  ``features`` and ``normals`` are derived data filled in
    by the pipeline.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    depth_std: Optional[np.ndarray] = None
    resolution: tuple[int, int] = (0, 0)
    features: Optional[np.ndarray] = None
    feature_pad: int = 0
    normals: Optional[NormalMap] = field(default=None, repr=False)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.resolution == (0, 0):
            for arr in (self.image, self.depth):
                if arr is not None:
                    self.resolution = (arr.shape[0], arr.shape[1])
                    break

    @property
    def height(self) -> int:
        return self.resolution[0]

    @property
    def width(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def depth_valid(self) -> np.ndarray:
        return self.depth > 0

    def check(self, atol: float = 1e-9) -> None:
        """Assert the view invariants; raises ``ValueError`` on violation."""
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=atol):
            raise ValueError("rotation is not orthonormal")
        if self.K[2, 2] != 1.0:
            raise ValueError("K[2][2] must be 1")
        if self.depth_std is not None and not np.all(self.depth_std > 0):
            raise ValueError("depth_std must be strictly positive")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be smaller than t_far")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``eye``.

    ``up`` is the world direction that appears upwards in the image (image v
    grows downwards, so the camera y axis points along ``-up``).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        # looking straight along the up axis; any perpendicular right works
        right = np.cross([1.0, 0.0, 0.0] if abs(forward[0]) < 0.9 else [0.0, 0.0, 1.0], forward)
        norm = np.linalg.norm(right)
    right /= norm
    y = np.cross(forward, right)
    R = np.stack([right, y, forward])
    return R, -R @ eye


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    """Square-pixel intrinsics with the principal point at the image center."""
    return np.array(
        [[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]]
    )


def world_to_camera(x, view: CameraView) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ view.R.T + view.t


def direction_to_camera(d, view: CameraView) -> np.ndarray:
    return np.asarray(d, dtype=np.float64) @ view.R.T


def project_unchecked(x_cam, K) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(uv, z, in_front)`` without raising."""
    x_cam = np.asarray(x_cam)
    z = x_cam[..., 2]
    in_front = z > _MIN_DEPTH
    safe_z = np.where(in_front, z, 1.0)
    xn = x_cam[..., 0] / safe_z
    yn = x_cam[..., 1] / safe_z
    u = K[0, 0] * xn + K[0, 1] * yn + K[0, 2]
    v = K[1, 1] * yn + K[1, 2]
    return np.stack([u, v], axis=-1), z, in_front


def project(x_cam, K) -> tuple[float, float, float]:
    """Project a single camera-space point to ``(u, v, z)``."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    if x_cam[2] <= _MIN_DEPTH:
        raise NonPositiveDepth(f"cannot project point with z={x_cam[2]:g}")
    uv, z, _ = project_unchecked(x_cam, np.asarray(K, dtype=np.float64))
    return float(uv[0]), float(uv[1]), float(z)


def pixel_directions(view: CameraView, pixels) -> np.ndarray:
    """Unit world-space directions through continuous pixel coordinates (..., 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ones = np.ones(pixels.shape[:-1] + (1,))
    homog = np.concatenate([pixels, ones], axis=-1)
    d_cam = homog @ np.linalg.inv(view.K).T
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    return d_cam @ view.R  # R^T applied to row vectors


def generate_ray(view: CameraView, pixel, t_near: float, t_far: float) -> Ray:
    d = pixel_directions(view, np.asarray(pixel, dtype=np.float64)[None])[0]
    return Ray(view.center, d, float(t_near), float(t_far))


def pixel_grid(height: int, width: int) -> np.ndarray:
    """All integer pixel coordinates as an (H, W, 2) array of (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def _bilinear_corners(shape, uv):
    h, w = shape
    u = np.clip(np.asarray(uv[..., 0], dtype=np.float64), 0.0, w - 1)
    v = np.clip(np.asarray(uv[..., 1], dtype=np.float64), 0.0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    idx = np.stack([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1], axis=-1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1)
    return idx, wts


def bilinear_sample(image, uv) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates, clamped to the border.

    ``image`` is (H, W) or (H, W, C); ``uv`` is (..., 2).  Returns (...) or (..., C).
    """
    image = np.asarray(image)
    uv = np.asarray(uv, dtype=np.float64)
    idx, wts = _bilinear_corners(image.shape[:2], uv)
    flat = image.reshape(image.shape[0] * image.shape[1], -1)
    out = np.einsum("...k,...kc->...c", wts, flat[idx])
    if image.ndim == 2:
        return out[..., 0]
    return out


def bilinear_matrix(shape, uv, offsets=None, n_maps: int = 1) -> sp.csr_matrix:
    """Sparse interpolation operator for batched lookups.

    ``uv`` is (M, 2).  With ``offsets`` (M,) selecting one of ``n_maps`` stacked
    maps of the given shape, the operator maps a (n_maps*H*W, C) stack to (M, C).
    The transpose scatters gradients back onto the maps.
    """
    idx, wts = _bilinear_corners(shape, uv)
    m = idx.shape[0]
    hw = shape[0] * shape[1]
    if offsets is not None:
        idx = idx + (np.asarray(offsets) * hw)[:, None]
    rows = np.repeat(np.arange(m), 4)
    return sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(m, n_maps * hw))


def depth_valid_at(depth, uv) -> np.ndarray:
    """True where every texel contributing to a bilinear lookup carries depth."""
    idx, wts = _bilinear_corners(depth.shape[:2], np.asarray(uv, dtype=np.float64))
    ok = depth.reshape(-1)[idx] > 0
    return np.all(ok | (wts == 0.0), axis=-1)


def backproject_depth(depth, K) -> np.ndarray:
    """Camera-space points for every pixel of a z-depth map."""
    h, w = depth.shape
    grid = pixel_grid(h, w)
    homog = np.concatenate([grid, np.ones((h, w, 1))], axis=-1)
    rays = homog @ np.linalg.inv(K).T  # z component is 1
    return rays * depth[..., None]


def depth_to_normals(view: CameraView, edge_threshold: float = 0.05) -> NormalMap:
    """Camera-space normals from central differences of back-projected depth.

    A pixel is valid when it and its four neighbours carry depth and no
    neighbour differs from it by more than ``edge_threshold``.  Border pixels
    are always invalid.
    """
    depth = np.asarray(view.depth, dtype=np.float64)
    h, w = depth.shape
    pts = backproject_depth(depth, view.K)
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(normals, valid)

    c = depth[1:-1, 1:-1]
    left, right = depth[1:-1, :-2], depth[1:-1, 2:]
    up, down = depth[:-2, 1:-1], depth[2:, 1:-1]
    ok = (c > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    for nb in (left, right, up, down):
        ok &= np.abs(nb - c) <= edge_threshold

    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dv, du)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-15
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    normals[1:-1, 1:-1] = np.where(ok[..., None], n, 0.0)
    valid[1:-1, 1:-1] = ok
    return NormalMap(normals, valid)
