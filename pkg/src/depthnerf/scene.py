"""Analytic synthetic scenes: primitives, scene files and camera rigs.

Scene files are line oriented; ``#`` starts a comment.  Records::

    sphere cx cy cz r            [cr cg cb [density]]
    box    cx cy cz hx hy hz     [cr cg cb [density]]
    plane  px py pz nx ny nz     [cr cg cb [density]]
    camera ring N RADIUS HSPAN_DEG VSPAN_DEG [FOV_DEG]
    camera target AZ_DEG EL_DEG
    render W H T_NEAR T_FAR BG_R BG_G BG_B     (T_NEAR/T_FAR may be ``auto``)

Planes are solid half-spaces behind the plane normal.  Units are meters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError
from .geometry import CameraView, intrinsics, look_at, pixel_directions, pixel_grid

log = logging.getLogger(__name__)

DEFAULT_COLOR = (0.8, 0.8, 0.8)
DEFAULT_DENSITY = 1e4


@dataclass
class Primitive:
    kind: str
    params: tuple[float, ...]
    color: tuple[float, float, float] = DEFAULT_COLOR
    density: float = DEFAULT_DENSITY
    # spatial frequency (cycles per meter) of a solid albedo pattern; 0 means flat color
    texture: float = 0.0

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("primitive density must be positive")
        if self.texture < 0:
            raise ValueError("texture frequency must be non-negative")
        if self.kind == "plane":
            n = np.asarray(self.params[3:6], dtype=np.float64)
            n = n / np.linalg.norm(n)
            self.params = tuple(self.params[:3]) + tuple(float(c) for c in n)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.params[:3], dtype=np.float64)

    def color_at(self, x) -> np.ndarray:
        """Albedo at points (..., 3): the base color, modulated within [0.5, 1] when textured."""
        x = np.asarray(x, dtype=np.float64)
        color = np.asarray(self.color, dtype=np.float64)
        if self.texture == 0:
            return np.broadcast_to(color, x.shape)
        wave = np.prod(np.sin(2.0 * np.pi * self.texture * (x - self.center)), axis=-1)
        return color * (0.75 + 0.25 * wave)[..., None]

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return float(self.params[3])
        if self.kind == "box":
            return float(np.linalg.norm(self.params[3:6]))
        return math.inf

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.center
        if self.kind == "sphere":
            return np.sum((x - c) ** 2, axis=-1) < self.params[3] ** 2
        if self.kind == "box":
            return np.all(np.abs(x - c) < np.asarray(self.params[3:6]), axis=-1)
        return (x - c) @ np.asarray(self.params[3:6]) < 0.0

    def signed_distance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.center
        if self.kind == "sphere":
            return np.linalg.norm(x - c, axis=-1) - self.params[3]
        if self.kind == "box":
            q = np.abs(x - c) - np.asarray(self.params[3:6])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside
        return (x - c) @ np.asarray(self.params[3:6])

    def intersect(self, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
        """Entry and exit ray parameters (nan on a miss); unit ``dirs`` assumed."""
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        o, d = np.broadcast_arrays(o, d)
        c = self.center
        if self.kind == "sphere":
            oc = o - c
            b = np.sum(oc * d, axis=-1)
            cc = np.sum(oc * oc, axis=-1) - self.params[3] ** 2
            disc = b * b - cc
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = np.where(hit, -b - sq, np.nan)
            t1 = np.where(hit, -b + sq, np.nan)
            return t0, t1
        if self.kind == "box":
            half = np.asarray(self.params[3:6])
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                ta = (c - half - o) * inv
                tb = (c + half - o) * inv
            lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
            hi = np.where(np.isnan(ta), np.inf, np.maximum(ta, tb))
            # rays parallel to a slab and outside it never hit
            parallel_out = (d == 0) & (np.abs(o - c) > half)
            t0 = np.max(lo, axis=-1)
            t1 = np.min(hi, axis=-1)
            hit = (t0 <= t1) & ~np.any(parallel_out, axis=-1)
            return np.where(hit, t0, np.nan), np.where(hit, t1, np.nan)
        n = np.asarray(self.params[3:6])
        denom = d @ n
        dist = (o - c) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = -dist / denom
        # solid where dist + t * denom < 0
        t0 = np.where(denom < 0, tp, -np.inf)
        t1 = np.where(denom > 0, tp, np.inf)
        parallel = denom == 0
        t0 = np.where(parallel & (dist >= 0), np.nan, t0)
        t1 = np.where(parallel & (dist >= 0), np.nan, t1)
        return t0, t1


@dataclass
class CameraRig:
    count: int = 4
    radius: float = 1.0
    hspan: float = 45.0
    vspan: float = 30.0
    fov: float = 40.0
    targets: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])


@dataclass
class RenderSettings:
    width: int = 64
    height: int = 64
    t_near: Optional[float] = None
    t_far: Optional[float] = None
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    rig: CameraRig = field(default_factory=CameraRig)
    render: RenderSettings = field(default_factory=RenderSettings)

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.render.background, dtype=np.float64)

    def bounded(self) -> list[Primitive]:
        return [p for p in self.primitives if p.kind != "plane"]

    @property
    def centroid(self) -> np.ndarray:
        prims = self.bounded() or self.primitives
        return np.mean([p.center for p in prims], axis=0)

    @property
    def radius(self) -> float:
        """Radius of the bounding sphere of all bounded primitives around the centroid."""
        c = self.centroid
        prims = self.bounded()
        if not prims:
            return 1.0
        return float(max(np.linalg.norm(p.center - c) + p.bounding_radius for p in prims))

    def radiance(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Density-weighted color and summed density at points (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        sigma = np.zeros(x.shape[:-1])
        weighted = np.zeros(x.shape[:-1] + (3,))
        for p in self.primitives:
            inside = p.contains(x)
            sigma = sigma + np.where(inside, p.density, 0.0)
            weighted = weighted + np.where(inside[..., None], p.density * p.color_at(x), 0.0)
        rgb = weighted / np.where(sigma > 0, sigma, 1.0)[..., None]
        return rgb, sigma

    def density(self, x) -> np.ndarray:
        return self.radiance(x)[1]

    def distance_to_surface(self, x) -> np.ndarray:
        """Unsigned distance to the closest primitive boundary."""
        x = np.asarray(x, dtype=np.float64)
        return np.min([np.abs(p.signed_distance(x)) for p in self.primitives], axis=0)

    def first_hit(self, origins, dirs, t_min: float = 0.0) -> np.ndarray:
        """Ray parameter of the first surface crossing beyond ``t_min`` (nan on a miss)."""
        best = None
        for p in self.primitives:
            t0, t1 = p.intersect(origins, dirs)
            # an origin already inside a primitive counts as a hit at t_min
            cand = np.where(t0 > t_min, t0, np.where(t1 > t_min, t_min, np.nan))
            best = cand if best is None else np.fmin(best, cand)
        return best

    def near_far(self, view: CameraView, margin: float = 0.1) -> tuple[float, float]:
        """Clip planes from the scene bounding sphere enlarged by ``margin``."""
        if self.render.t_near is not None and self.render.t_far is not None:
            return self.render.t_near, self.render.t_far
        dist = float(np.linalg.norm(view.center - self.centroid))
        r = self.radius * (1.0 + margin)
        near = self.render.t_near if self.render.t_near is not None else max(dist - r, 1e-3)
        far = self.render.t_far if self.render.t_far is not None else dist + r
        return near, far


# --- camera placement --------------------------------------------------------


def ring_angles(count: int, hspan: float, vspan: float) -> list[tuple[float, float]]:
    """Azimuth/elevation pairs (degrees) for source cameras spanning the given angles."""
    if count == 4:
        h, v = hspan / 2.0, vspan / 2.0
        return [(-h, -v), (h, -v), (-h, v), (h, v)]
    if count == 1:
        return [(0.0, 0.0)]
    out = []
    for k in range(count):
        az = -hspan / 2.0 + hspan * k / (count - 1)
        el = vspan / 2.0 * (1 if k % 2 else -1)
        out.append((az, el))
    return out


def orbit_position(center, radius: float, az_deg: float, el_deg: float) -> np.ndarray:
    """Point on a sphere around ``center``; az=el=0 sits on the -z side, +el is up (-y)."""
    az, el = math.radians(az_deg), math.radians(el_deg)
    offset = np.array([math.cos(el) * math.sin(az), -math.sin(el), -math.cos(el) * math.cos(az)])
    return np.asarray(center, dtype=np.float64) + radius * offset


def make_camera(scene: SyntheticScene, az: float, el: float, width=None, height=None) -> CameraView:
    width = width or scene.render.width
    height = height or scene.render.height
    eye = orbit_position(scene.centroid, scene.rig.radius, az, el)
    R, t = look_at(eye, scene.centroid)
    focal = (width / 2.0) / math.tan(math.radians(scene.rig.fov) / 2.0)
    return CameraView(intrinsics(focal, width, height), R, t, resolution=(height, width))


def scene_cameras(scene: SyntheticScene) -> tuple[list[CameraView], list[CameraView]]:
    """Source cameras on the ring and held-out target cameras."""
    rig = scene.rig
    if rig.hspan == 0 and rig.vspan == 0:
        log.warning("camera ring has zero span: all source cameras coincide")
    sources = [make_camera(scene, az, el) for az, el in ring_angles(rig.count, rig.hspan, rig.vspan)]
    targets = [make_camera(scene, az, el) for az, el in rig.targets]
    return sources, targets


def random_target_angles(scene: SyntheticScene, n: int, rng) -> list[tuple[float, float]]:
    """Training target viewpoints drawn uniformly inside the source span."""
    h, v = scene.rig.hspan / 2.0, scene.rig.vspan / 2.0
    return [(float(rng.uniform(-h, h)), float(rng.uniform(-v, v))) for _ in range(n)]


# --- ground-truth rendering ---------------------------------------------------


def render_exact(view: CameraView, scene: SyntheticScene, pixels=None, t_range=None):
    """Exact volume rendering of the piecewise-constant scene along pixel rays.

    Returns ``(rgb, alpha)`` with the background composited behind ``alpha``.
    """
    if pixels is None:
        pixels = pixel_grid(view.height, view.width)
    lead = pixels.shape[:-1]
    dirs = pixel_directions(view, pixels).reshape(-1, 3)
    origins = np.broadcast_to(view.center, dirs.shape)
    near, far = t_range if t_range is not None else scene.near_far(view)
    rgb, alpha = exact_ray_integral(scene, origins, dirs, near, far)
    rgb = rgb + (1.0 - alpha)[:, None] * scene.background
    return rgb.reshape(lead + (3,)), alpha.reshape(lead)


def exact_ray_integral(scene: SyntheticScene, origins, dirs, near, far):
    """Emission-absorption integral over [near, far] for every ray.

    Density is constant between primitive boundaries, so each segment's
    absorption is closed form.  Flat colors make the whole integral closed form;
    textured primitives are integrated per segment with Gauss-Legendre nodes in
    the absorbed fraction ``u = 1 - exp(-sigma s)``, where the integrand is smooth.
    """
    n = dirs.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,))
    breaks = [near, far]
    for p in scene.primitives:
        t0, t1 = p.intersect(origins, dirs)
        for t in (t0, t1):
            breaks.append(np.clip(np.where(np.isfinite(t), t, near), near, far))
    bp = np.sort(np.stack(breaks, axis=-1), axis=-1)  # (n, K)
    seg = np.diff(bp, axis=-1)
    mid = 0.5 * (bp[:, 1:] + bp[:, :-1])
    pts = origins[:, None, :] + mid[..., None] * dirs[:, None, :]
    rgb, sigma = scene.radiance(pts)
    tau = np.minimum(sigma * seg, 80.0)
    trans = np.exp(-np.concatenate([np.zeros((n, 1)), np.cumsum(tau, axis=-1)[:, :-1]], axis=-1))
    absorbed = -np.expm1(-tau)
    w = trans * absorbed
    if any(p.texture > 0 for p in scene.primitives):
        rgb = _segment_mean_color(scene, origins, dirs, bp[:, :-1], seg, sigma, absorbed, rgb)
    return np.sum(w[..., None] * rgb, axis=1), np.sum(w, axis=-1)


def _segment_mean_color(scene, origins, dirs, start, seg, sigma, absorbed, flat_rgb, panels=32, order=8):
    """Absorption-weighted mean color of each segment by composite Gauss-Legendre quadrature.

    Each segment is cut where the remaining transmittance drops below exp(-40)
    and split into equal panels, fine enough for both the decay and the texture.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)
    with np.errstate(divide="ignore"):
        length = np.minimum(seg, np.where(sigma > 0, 40.0 / sigma, 0.0))
    h = length / panels
    offsets = (np.arange(panels)[:, None] + 0.5 * (nodes + 1.0)).ravel()  # in panel widths
    s = offsets * h[..., None]  # (n, K, panels * order)
    t = start[..., None] + s
    pts = origins[:, None, None, :] + t[..., None] * dirs[:, None, None, :]
    rgb, _ = scene.radiance(pts)
    wq = np.tile(0.5 * weights, panels) * h[..., None] * sigma[..., None] * np.exp(-sigma[..., None] * s)
    total = np.einsum("nkq,nkqc->nkc", wq, rgb)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = total / absorbed[..., None]
    return np.where((absorbed > 0)[..., None], mean, flat_rgb)


def render_depth(view: CameraView, scene: SyntheticScene, pixels=None) -> np.ndarray:
    """Camera-space z of the first surface per pixel; 0 where the ray misses."""
    if pixels is None:
        pixels = pixel_grid(view.height, view.width)
    lead = pixels.shape[:-1]
    dirs = pixel_directions(view, pixels).reshape(-1, 3)
    origins = np.broadcast_to(view.center, dirs.shape)
    t = scene.first_hit(origins, dirs, t_min=1e-6)
    z = t * (dirs @ view.R[2])
    return np.where(np.isfinite(z), z, 0.0).reshape(lead)


# --- scene files --------------------------------------------------------------

_ARITY = {"sphere": 4, "box": 6, "plane": 6}


def _floats(tokens, line_no, cols, allow_auto=False):
    out = []
    for tok, col in zip(tokens, cols):
        if allow_auto and tok == "auto":
            out.append(None)
            continue
        try:
            out.append(float(tok))
        except ValueError:
            raise ParseError(f"expected a number, got {tok!r}", line_no, col) from None
    return out


def parse_scene(text: str) -> SyntheticScene:
    prims: list[Primitive] = []
    rig = CameraRig()
    render = RenderSettings()
    targets: list[tuple[float, float]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        tokens, cols = [], []
        pos = 0
        for tok in line.split():
            pos = line.index(tok, pos)
            tokens.append(tok)
            cols.append(pos + 1)
            pos += len(tok)
        if not tokens:
            continue
        kind, args, acols = tokens[0], tokens[1:], cols[1:]
        end_col = len(line.rstrip()) + 1
        if kind in _ARITY:
            need = _ARITY[kind]
            if len(args) not in (need, need + 3, need + 4, need + 5):
                raise ParseError(
                    f"{kind} takes {need} geometry values, optional color, density and texture", line_no, end_col
                )
            vals = _floats(args, line_no, acols)
            color = tuple(vals[need : need + 3]) if len(vals) >= need + 3 else DEFAULT_COLOR
            density = vals[need + 3] if len(vals) >= need + 4 else DEFAULT_DENSITY
            texture = vals[need + 4] if len(vals) == need + 5 else 0.0
            if density <= 0:
                raise ParseError("density must be positive", line_no, acols[need + 3])
            if texture < 0:
                raise ParseError("texture frequency must be non-negative", line_no, acols[-1])
            if kind == "sphere" and vals[3] <= 0:
                raise ParseError("sphere radius must be positive", line_no, acols[3])
            if kind == "box" and min(vals[3:6]) <= 0:
                raise ParseError("box half extents must be positive", line_no, acols[3])
            prims.append(Primitive(kind, tuple(vals[:need]), color, density, texture))
        elif kind == "camera":
            if not args:
                raise ParseError("camera needs 'ring' or 'target'", line_no, end_col)
            sub = args[0]
            if sub == "ring":
                if len(args) not in (5, 6):
                    raise ParseError("camera ring N RADIUS HSPAN VSPAN [FOV]", line_no, end_col)
                vals = _floats(args[1:], line_no, acols[1:])
                if vals[0] != int(vals[0]) or vals[0] < 1:
                    raise ParseError("camera count must be a positive integer", line_no, acols[1])
                rig = CameraRig(int(vals[0]), vals[1], vals[2], vals[3], vals[4] if len(vals) == 5 else 40.0)
            elif sub == "target":
                if len(args) != 3:
                    raise ParseError("camera target AZ EL", line_no, end_col)
                az, el = _floats(args[1:], line_no, acols[1:])
                targets.append((az, el))
            else:
                raise ParseError(f"unknown camera record {sub!r}", line_no, acols[0])
        elif kind == "render":
            if len(args) != 7:
                raise ParseError("render W H T_NEAR T_FAR BG_R BG_G BG_B", line_no, end_col)
            w, h = _floats(args[:2], line_no, acols[:2])
            near, far = _floats(args[2:4], line_no, acols[2:4], allow_auto=True)
            bg = _floats(args[4:], line_no, acols[4:])
            if w != int(w) or h != int(h) or w < 1 or h < 1:
                raise ParseError("image size must be positive integers", line_no, acols[0])
            if near is not None and far is not None and not 0 < near < far:
                raise ParseError("need 0 < t_near < t_far", line_no, acols[2])
            render = RenderSettings(int(w), int(h), near, far, tuple(bg))
        else:
            raise ParseError(f"unknown record {kind!r}", line_no, cols[0])
    if targets:
        rig.targets = targets
    return SyntheticScene(prims, rig, render)


def load_scene(path) -> SyntheticScene:
    return parse_scene(Path(path).read_text())


def _num(v: float) -> str:
    # shortest text that parses back to the identical float
    return repr(float(v))


def format_scene(scene: SyntheticScene) -> str:
    """Scene file text that parses back to an identical scene."""
    lines = []
    for p in scene.primitives:
        extra = (p.texture,) if p.texture else ()
        vals = " ".join(_num(v) for v in p.params + tuple(p.color) + (p.density,) + extra)
        lines.append(f"{p.kind} {vals}")
    r = scene.rig
    lines.append(f"camera ring {r.count} {_num(r.radius)} {_num(r.hspan)} {_num(r.vspan)} {_num(r.fov)}")
    for az, el in r.targets:
        lines.append(f"camera target {_num(az)} {_num(el)}")
    s = scene.render
    near = "auto" if s.t_near is None else _num(s.t_near)
    far = "auto" if s.t_far is None else _num(s.t_far)
    bg = " ".join(_num(c) for c in s.background)
    lines.append(f"render {s.width} {s.height} {near} {far} {bg}")
    return "\n".join(lines) + "\n"


# --- standard scenes ----------------------------------------------------------

PRESETS = {
    "one-sphere": """
sphere 0 0 0 0.2  0.9 0.3 0.2
""",
    "two-spheres": """
sphere -0.12 0.02 0 0.15  0.9 0.35 0.2
sphere  0.14 -0.04 0.08 0.11  0.2 0.55 0.9
""",
    "sphere-box": """
box 0 0.12 0 0.22 0.05 0.16  0.75 0.75 0.7
sphere 0.02 -0.05 0 0.12  0.3 0.8 0.35
""",
}


def preset_scene(name: str, width: int = 64, height: int = 64) -> SyntheticScene:
    scene = parse_scene(PRESETS[name])
    scene.render.width, scene.render.height = width, height
    return scene


STANDARD_SUITE = ("one-sphere", "two-spheres", "sphere-box")
