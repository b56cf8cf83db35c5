"""Scene preparation, the patch-based training loop, Adam, and held-out evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .encoding import EncoderConfig, PositionalEncodingConfig
from .errors import DivergenceDetected
from .field import FieldConfig, RadianceField, compute_conditioning, init_params, prepare_sources
from .geometry import CameraView, depth_to_normals, pixel_directions, pixel_grid
from .objective import ObjectiveConfig, PerceptualHook, metrics, total_loss
from .parallel import map_chunks
from .params import FieldParams, save_checkpoint
from .rendering import composite, composite_backward, render_gt_depth
from .sampling import SamplingConfig, depth_guided_batch, ray_rng, segment_lengths
from .scene import SyntheticScene, format_scene, make_camera, random_target_angles, render_exact, scene_cameras

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction on a flat parameter vector (updated in place)."""

    def __init__(self, size: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, dtype=np.float64):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        theta -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(theta.dtype)


@dataclass
class TrainConfig:
    iterations: int = 10_000
    lr: float = 1e-4
    # when set, the rate decays exponentially from ``lr`` to ``lr_final`` over the run
    lr_final: Optional[float] = None
    batch: int = 4
    patch: int = 64
    n_train_views: int = 16
    checkpoint_every: int = 1000
    eval_every: int = 0
    seed: int = 0
    dtype: str = "float32"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)


@dataclass
class PreparedScene:
    """Source views with images, (noisy) depth and normals plus target views with ground truth."""

    scene: SyntheticScene
    sources: list[CameraView]
    train_targets: list[CameraView]
    heldout_targets: list[CameraView]
    noise_std: float
    sampling: SamplingConfig
    seed: int
    threads: int = 1
    _ts_cache: dict = field(default_factory=dict, repr=False)

    @property
    def background(self) -> np.ndarray:
        return self.scene.background

    def sample_ts(self, split: str, index: int) -> np.ndarray:
        """Cached (H*W, S) depth-guided ray parameters for one target view."""
        key = (split, index)
        if key not in self._ts_cache:
            view = (self.train_targets if split == "train" else self.heldout_targets)[index]
            self._ts_cache[key] = self.view_ts(view, 0 if split == "train" else 1, index)
        return self._ts_cache[key]

    def view_ts(self, view: CameraView, *stream: int, chunk: int = 1024) -> np.ndarray:
        """Depth-guided ray parameters for every pixel of ``view``; ``stream`` keys the random stream."""
        origins, dirs = view_rays(view)
        near, far = self.scene.near_far(view)
        starts = list(range(0, dirs.shape[0], chunk))

        def work(k):
            sl = slice(starts[k], starts[k] + chunk)
            rng = ray_rng(self.seed, 2, *stream, k)
            return depth_guided_batch(origins[sl], dirs[sl], near, far, self.sources, self.sampling, rng)[0]

        return np.concatenate(map_chunks(work, len(starts), self.threads))


def view_rays(view: CameraView):
    dirs = pixel_directions(view, pixel_grid(view.height, view.width)).reshape(-1, 3)
    return np.broadcast_to(view.center, dirs.shape), dirs


def attach_depth(view: CameraView, scene: SyntheticScene, noise_std: float, rng, edge_threshold: float = 0.05) -> CameraView:
    depth, std = render_gt_depth(view, scene, noise_std, rng)
    view = replace(view, depth=depth, depth_std=std)
    view.normals = depth_to_normals(view, edge_threshold)
    return view


def prepare_scene(
    scene: SyntheticScene,
    noise_std: float = 0.0,
    seed: int = 0,
    sampling: SamplingConfig = SamplingConfig(),
    n_train_views: int = 16,
    threads: int = 1,
) -> PreparedScene:
    rng = np.random.default_rng([seed, 7])
    sources, heldout = scene_cameras(scene)
    prepared_sources = []
    for v in sources:
        v = attach_depth(v, scene, noise_std, rng)
        v.image, _ = render_exact(v, scene)
        prepared_sources.append(v)
    train = []
    for az, el in random_target_angles(scene, n_train_views, rng):
        v = make_camera(scene, az, el)
        v.image, _ = render_exact(v, scene)
        train.append(v)
    for v in heldout:
        v.image, _ = render_exact(v, scene)
    return PreparedScene(scene, prepared_sources, train, heldout, noise_std, sampling, seed, threads)


class Trainer:
    def __init__(
        self,
        data: PreparedScene,
        field_cfg: FieldConfig,
        cfg: TrainConfig,
        params: Optional[FieldParams] = None,
        vgg_hook: Optional[PerceptualHook] = None,
    ):
        self.data = data
        self.field_cfg = field_cfg
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.model = RadianceField(field_cfg)
        if params is None:
            params = init_params(field_cfg, cfg.seed)
        self.params = params.astype(self.dtype)
        self.optim = Adam(len(self.params), cfg.lr, dtype=self.dtype)
        self.sources = prepare_sources(data.sources, field_cfg).astype(self.dtype)
        self.vgg_hook = vgg_hook
        self.iteration = 0

    # -- batches ---------------------------------------------------------------

    def sample_batch(self, rng) -> dict:
        """Random square patches from the training targets."""
        p = self.cfg.patch
        views = self.data.train_targets
        origins, dirs, ts, far, target = [], [], [], [], []
        for _ in range(self.cfg.batch):
            vi = int(rng.integers(len(views)))
            view = views[vi]
            if p > view.height or p > view.width:
                raise ValueError(f"patch {p} larger than image {view.height}x{view.width}")
            y = int(rng.integers(view.height - p + 1))
            x = int(rng.integers(view.width - p + 1))
            rows = (np.arange(y, y + p)[:, None] * view.width + np.arange(x, x + p)[None, :]).ravel()
            o, d = view_rays(view)
            origins.append(o[rows])
            dirs.append(d[rows])
            ts.append(self.data.sample_ts("train", vi)[rows])
            far.append(np.full(rows.size, self.data.scene.near_far(view)[1]))
            target.append(view.image[y : y + p, x : x + p])
        return {
            "origins": np.concatenate(origins),
            "dirs": np.concatenate(dirs),
            "ts": np.concatenate(ts),
            "far": np.concatenate(far),
            "target": np.stack(target),
        }

    # -- forward / backward ------------------------------------------------------

    def forward(self, params: FieldParams, origins, dirs, ts, far):
        """Rendered colors of M rays (background blended) and the state needed for :meth:`backward`."""
        n_rays, n_s = ts.shape
        pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
        cond = compute_conditioning(pts.reshape(-1, 3), np.repeat(dirs, n_s, axis=0), self.data.sources, self.dtype)
        feats, enc_cache = self.model.encode(self.sources, params)
        rgb, sigma, fcache = self.model.forward(cond, feats, params)
        deltas = segment_lengths(ts, far).astype(self.dtype)
        color, alpha, _, _, ccache = composite(sigma.reshape(n_rays, n_s), rgb.reshape(n_rays, n_s, 3), deltas)
        bg = self.data.background.astype(self.dtype)
        color = color + (1.0 - alpha)[:, None] * bg
        return color, (params, enc_cache, fcache, ccache, bg)

    def backward(self, dcolor, state) -> FieldParams:
        params, enc_cache, fcache, ccache, bg = state
        grads = params.zeros_like()
        g = dcolor.astype(self.dtype)
        dsigma, drgb = composite_backward(g, ccache, dalpha=-(g @ bg))
        dfeats = self.model.backward(drgb.reshape(-1, 3), dsigma.reshape(-1), fcache, grads)
        self.model.encoder.backward(dfeats, enc_cache, grads)
        return grads

    def batch_loss(self, params: FieldParams, batch: dict):
        """Objective on a batch and the render state for backpropagation."""
        color, state = self.forward(params, batch["origins"], batch["dirs"], batch["ts"], batch["far"])
        p, b = self.cfg.patch, self.cfg.batch
        loss, dpred = total_loss(color.reshape(b, p, p, 3), batch["target"], self.cfg.objective, self.vgg_hook)
        return loss, dpred.reshape(-1, 3), state

    def loss_and_grad(self, params: FieldParams, batch: dict):
        loss, dcolor, state = self.batch_loss(params, batch)
        return loss, self.backward(dcolor, state)

    def learning_rate(self, iteration: int) -> float:
        cfg = self.cfg
        if cfg.lr_final is None or cfg.iterations <= 1:
            return cfg.lr
        frac = min(iteration / (cfg.iterations - 1), 1.0)
        return cfg.lr * (cfg.lr_final / cfg.lr) ** frac

    def step(self, rng, batch: Optional[dict] = None) -> float:
        """One Adam update on ``batch`` (default: a fresh random batch from ``rng``)."""
        if batch is None:
            batch = self.sample_batch(rng)
        loss, grads = self.loss_and_grad(self.params, batch)
        if not math.isfinite(loss) or not np.all(np.isfinite(grads.vector)):
            raise DivergenceDetected(self.iteration)
        self.optim.lr = self.learning_rate(self.iteration)
        self.optim.step(self.params.vector, grads.vector)
        self.iteration += 1
        return loss

    # -- evaluation ----------------------------------------------------------------

    def render_view(self, split: str, index: int, chunk: int = 2048) -> np.ndarray:
        view = (self.data.train_targets if split == "train" else self.data.heldout_targets)[index]
        return self.render_camera(view, self.data.sample_ts(split, index), chunk)

    def render_camera(self, view: CameraView, ts: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """(H, W, 3) image of ``view`` from per-pixel ray parameters ``ts``."""
        origins, dirs = view_rays(view)
        far = self.data.scene.near_far(view)[1]
        out = []
        for s in range(0, dirs.shape[0], chunk):
            e = s + chunk
            out.append(self.forward(self.params, origins[s:e], dirs[s:e], ts[s:e], np.full(ts[s:e].shape[0], far))[0])
        return np.concatenate(out).reshape(view.height, view.width, 3).astype(np.float64)

    def evaluate(self) -> dict[str, float]:
        """Metrics averaged over held-out targets (plus the objective on full images)."""
        rows = []
        for i, view in enumerate(self.data.heldout_targets):
            pred = self.render_view("heldout", i)
            row = metrics(pred, view.image)
            k = self.cfg.objective.ab_downsample_k
            if view.height % k == 0 and view.width % k == 0:
                row["loss"], _ = total_loss(pred, view.image, self.cfg.objective)
            else:
                row["loss"] = float("nan")
            rows.append(row)
        return {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}


@dataclass
class TrainResult:
    params: FieldParams
    losses: list[float]
    evals: list[tuple[int, dict]]
    checkpoint: Optional[Path] = None


def run_training(
    data: PreparedScene,
    field_cfg: FieldConfig,
    cfg: TrainConfig,
    out_dir=None,
    run_id: str = "run",
    params: Optional[FieldParams] = None,
) -> TrainResult:
    """Train with Adam on random target patches.

    With ``out_dir``: writes the run configuration ``<run_id>.json``,
    ``<run_id>.ckpt`` periodically (and at the end),
    ``<run_id>_loss.csv`` and ``<run_id>_metrics.csv``.  On a non-finite loss the
    last good checkpoint is kept and :class:`DivergenceDetected` is raised.
    """
    trainer = Trainer(data, field_cfg, cfg, params)
    rng = ray_rng(cfg.seed, 3)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / f"{run_id}.ckpt" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        RunConfig(format_scene(data.scene), field_cfg, cfg, data.sampling, data.noise_std, data.seed).save(
            out / f"{run_id}.json"
        )
        save_checkpoint(ckpt, trainer.params)
    losses: list[float] = []
    evals: list[tuple[int, dict]] = []
    for it in range(cfg.iterations):
        try:
            losses.append(trainer.step(rng))
        except DivergenceDetected as exc:
            exc.checkpoint_path = ckpt
            raise
        done = it + 1
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, trainer.params)
        if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.iterations:
            evals.append((done, trainer.evaluate()))
            log.info("%s iter %d: %s", run_id, done, evals[-1][1])
    evals.append((cfg.iterations, trainer.evaluate()))
    if out is not None:
        save_checkpoint(ckpt, trainer.params)
        with open(out / f"{run_id}_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss"])
            w.writerows((i, repr(v)) for i, v in enumerate(losses))
        write_metrics_csv(out / f"{run_id}_metrics.csv", [(run_id, it, m) for it, m in evals])
    return TrainResult(trainer.params, losses, evals, ckpt)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "iter", "L1", "L2", "PSNR", "SSIM"])
        for run_id, it, m in rows:
            w.writerow([run_id, it] + [repr(m[k]) for k in ("L1", "L2", "PSNR", "SSIM")])


# --- run configuration sidecar ---------------------------------------------------------


def field_config_from_dict(d: dict) -> FieldConfig:
    d = dict(d)
    enc = dict(d.pop("encoder"))
    enc["hidden"] = tuple(enc["hidden"])
    return FieldConfig(
        encoder=EncoderConfig(**enc),
        position_pe=PositionalEncodingConfig(**d.pop("position_pe")),
        depth_pe=PositionalEncodingConfig(**d.pop("depth_pe")),
        f1_hidden=tuple(d.pop("f1_hidden")),
        f2_hidden=tuple(d.pop("f2_hidden")),
        **d,
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    return TrainConfig(objective=ObjectiveConfig(**d.pop("objective")), **d)


@dataclass
class RunConfig:
    """Everything needed to rebuild a trained model's data and architecture."""

    scene_text: str
    field: FieldConfig
    train: TrainConfig
    sampling: SamplingConfig
    noise_std: float
    seed: int

    def save(self, path) -> None:
        doc = {
            "scene": self.scene_text,
            "field": asdict(self.field),
            "train": asdict(self.train),
            "sampling": asdict(self.sampling),
            "noise_std": self.noise_std,
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        return cls(
            doc["scene"],
            field_config_from_dict(doc["field"]),
            train_config_from_dict(doc["train"]),
            SamplingConfig(**doc["sampling"]),
            float(doc["noise_std"]),
            int(doc["seed"]),
        )
