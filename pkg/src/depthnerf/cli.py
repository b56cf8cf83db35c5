"""Command-line front end.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DepthNerfError
from .experiments import (
    MODEL_LENGTH_UNIT,
    NOISE_FRACTIONS,
    STRATEGIES,
    AblationConfig,
    run_depth_noise_ablation,
    run_sampling_stats,
    write_sampling_csv,
)
from .field import FieldConfig
from .objective import ObjectiveConfig
from .params import load_checkpoint
from .parallel import resolve_threads
from .rendering import render_gt_depth, write_pgm16, write_ppm
from .sampling import SamplingConfig
from .scene import (
    PRESETS,
    STANDARD_SUITE,
    format_scene,
    load_scene,
    parse_scene,
    preset_scene,
    render_exact,
    scene_cameras,
)
from .training import RunConfig, TrainConfig, Trainer, prepare_scene, run_training, write_metrics_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $DINER_THREADS or 1)")


def _scene_args(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--scene", type=Path, help="scene file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="built-in scene")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="override the image size")


def _train_args(p, iterations, defaults=None):
    d = defaults or {}
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--lr", type=float, default=d.get("lr", 1e-4))
    p.add_argument("--lr-final", type=float, default=d.get("lr_final"), help="decay the rate exponentially to this value")
    p.add_argument("--patch", type=int, default=d.get("patch", 64))
    p.add_argument("--batch", type=int, default=d.get("batch", 4))
    p.add_argument("--ab-k", type=int, default=d.get("ab_k", 8), help="anti-bias pooling window")
    p.add_argument("--train-views", type=int, default=d.get("train_views", 16), help="number of random training targets")
    p.add_argument("--pad", type=int, default=d.get("pad", 64), help="source image padding in pixels")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--float64", action="store_true", help="train in double precision")
    p.add_argument("--no-depth", action="store_true", help="zero the depth-difference encoding")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthnerf", description="Depth-guided image-based radiance field toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("scene-gen", help="write a scene file and its camera set")
    _scene_args(p)
    p.add_argument("--out", type=Path, required=True, help="output scene file")
    p.add_argument("--cameras", type=Path, help="optional JSON with camera matrices")
    _common(p)

    p = sub.add_parser("render", help="render a view: ground truth, or a trained model with --checkpoint")
    _scene_args(p, required=False)
    p.add_argument("--view", type=int, default=0, help="camera index: sources first, then held-out targets")
    p.add_argument("--out", type=Path, required=True, help="output PPM")
    p.add_argument("--depth-out", type=Path, help="output 16-bit PGM of the (noisy) depth map")
    p.add_argument("--noise", type=float, default=0.0, help="depth noise std as a fraction of the scene radius")
    p.add_argument("--checkpoint", type=Path, help="trained checkpoint (its .json run config is read too)")
    _common(p)

    p = sub.add_parser("train", help="train a model on a synthetic scene")
    _scene_args(p)
    _train_args(p, 10_000)
    p.add_argument("--noise", type=float, default=0.0, help="depth noise std as a fraction of the scene radius")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--run-id", default="run")
    _common(p)

    p = sub.add_parser("sampling-stats", help="Chamfer statistics of the two samplers")
    _scene_args(p, required=False)
    p.add_argument("--budgets", type=int, nargs="+", default=[40, 160])
    p.add_argument("--n-rays", type=int, default=4096)
    p.add_argument("--noise", type=float, default=0.01, help="depth noise std as a fraction of the scene radius")
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--summary", type=Path, help="optional JSON summary")
    _common(p)

    p = sub.add_parser("noise-ablation", help="train one model per depth-noise level")
    _scene_args(p, required=False)
    ablation = AblationConfig()
    _train_args(p, ablation.iterations, asdict(ablation))
    p.add_argument("--levels", type=float, nargs="+", default=list(NOISE_FRACTIONS))
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--csv", type=Path, required=True)
    _common(p)

    p = sub.add_parser("eval", help="held-out metrics of a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--csv", type=Path, help="metrics CSV (default: print)")
    p.add_argument("--run-id", default="eval")
    _common(p)
    return parser


# --- helpers ------------------------------------------------------------------------


def _load_scene(args):
    scene = load_scene(args.scene) if args.scene is not None else preset_scene(args.preset)
    if getattr(args, "size", None):
        scene.render.width, scene.render.height = args.size
    return scene


def _configs(args):
    k = min(args.ab_k, args.patch)
    train = TrainConfig(
        iterations=args.iterations,
        lr=args.lr,
        lr_final=args.lr_final,
        batch=args.batch,
        patch=args.patch,
        n_train_views=args.train_views,
        checkpoint_every=args.checkpoint_every,
        eval_every=args.eval_every,
        seed=args.seed,
        dtype="float64" if args.float64 else "float32",
        objective=ObjectiveConfig(patch_size=args.patch, ab_downsample_k=k),
    )
    field_cfg = FieldConfig(pad=args.pad, depth_conditioning=not args.no_depth, length_unit=MODEL_LENGTH_UNIT)
    return train, field_cfg


def _load_run(checkpoint: Path, threads: int):
    run = RunConfig.load(checkpoint.with_suffix(".json"))
    params = load_checkpoint(checkpoint, run.field.shapes())
    data = prepare_scene(parse_scene(run.scene_text), run.noise_std, run.seed, run.sampling, run.train.n_train_views, threads)
    return run, Trainer(data, run.field, run.train, params)


# --- commands -----------------------------------------------------------------------


def cmd_scene_gen(args, threads):
    scene = _load_scene(args)
    args.out.write_text(format_scene(scene))
    sources, targets = scene_cameras(scene)
    if args.cameras is not None:
        cams = [
            {"role": role, "K": v.K.tolist(), "R": v.R.tolist(), "t": v.t.tolist(), "center": v.center.tolist()}
            for role, views in (("source", sources), ("target", targets))
            for v in views
        ]
        args.cameras.write_text(json.dumps(cams, indent=2) + "\n")
    print(f"{args.out}: {len(scene.primitives)} primitives, {len(sources)} source and {len(targets)} target cameras")


def cmd_render(args, threads):
    if args.checkpoint is not None:
        run, trainer = _load_run(args.checkpoint, threads)
        data = trainer.data
        views = data.sources + data.heldout_targets
        if not 0 <= args.view < len(views):
            raise UsageError(f"--view must be in [0, {len(views) - 1}]")
        view = views[args.view]
        img = trainer.render_camera(view, data.view_ts(view, 3, args.view))
        write_ppm(args.out, img)
        return
    if args.scene is None and args.preset is None:
        raise UsageError("render: one of --scene, --preset or --checkpoint is required")
    scene = _load_scene(args)
    sources, targets = scene_cameras(scene)
    views = sources + targets
    if not 0 <= args.view < len(views):
        raise UsageError(f"--view must be in [0, {len(views) - 1}]")
    view = views[args.view]
    img, _ = render_exact(view, scene)
    write_ppm(args.out, img)
    if args.depth_out is not None:
        rng = np.random.default_rng([args.seed, args.view])
        depth, _ = render_gt_depth(view, scene, args.noise * scene.radius, rng)
        near, far = scene.near_far(view)
        write_pgm16(args.depth_out, np.where(depth > 0, depth, np.nan), near, far)


def cmd_train(args, threads):
    scene = _load_scene(args)
    train, field_cfg = _configs(args)
    data = prepare_scene(scene, args.noise * scene.radius, args.seed, SamplingConfig(), train.n_train_views, threads)
    result = run_training(data, field_cfg, train, args.out_dir, args.run_id)
    it, m = result.evals[-1]
    print(f"{args.run_id}: iter {it} PSNR {m['PSNR']:.3f} SSIM {m['SSIM']:.4f} L1 {m['L1']:.5f}")


def cmd_sampling_stats(args, threads):
    names = [None] if (args.scene is not None or args.preset is not None) else list(STANDARD_SUITE)
    summary = {}
    first = True
    for name in names:
        scene = _load_scene(args) if name is None else preset_scene(name)
        label = name or (args.preset or str(args.scene))
        stats = run_sampling_stats(scene, STRATEGIES, args.budgets, args.n_rays, args.seed, args.noise)
        write_sampling_csv(args.csv, stats.results, mode="w" if first else "a", header=first)
        first = False
        for (strategy, n), v in stats.summary().items():
            summary.setdefault(label, {})[f"{strategy}:{n}"] = v
            print(f"{label} {strategy} {{{n}}}: median {v['median'] * 1e3:.4f} mm, max {v['max'] * 1e3:.3f} mm")
    if args.summary is not None:
        args.summary.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_noise_ablation(args, threads):
    if args.scene is None and args.preset is None:
        scene = AblationConfig().scene()
        if args.size:
            scene.render.width, scene.render.height = args.size
    else:
        scene = _load_scene(args)
    train, field_cfg = _configs(args)
    rows = run_depth_noise_ablation(
        scene, args.levels, train, field_cfg, SamplingConfig(), args.seed, args.out_dir, args.csv
    )
    for row in rows:
        print(f"noise {row['noise_fraction']:g} x radius: PSNR {row['PSNR']:.3f} SSIM {row['SSIM']:.4f}")


def cmd_eval(args, threads):
    run, trainer = _load_run(args.checkpoint, threads)
    m = trainer.evaluate()
    if args.csv is not None:
        write_metrics_csv(args.csv, [(args.run_id, run.train.iterations, m)])
    print(" ".join(f"{k} {m[k]:.6g}" for k in ("L1", "L2", "PSNR", "SSIM")))


def _check_unknown_flags(parser, argv) -> None:
    """Report unknown options by name before argparse complains about missing ones."""
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(argv[0])
    known = (sub or parser)._option_string_actions
    for tok in argv[1:] if sub else argv:
        if tok.startswith("-") and not _is_number(tok) and tok.split("=", 1)[0] not in known:
            raise UsageError(f"unrecognized argument: {tok.split('=', 1)[0]}")


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


COMMANDS = {
    "scene-gen": cmd_scene_gen,
    "render": cmd_render,
    "train": cmd_train,
    "sampling-stats": cmd_sampling_stats,
    "noise-ablation": cmd_noise_ablation,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _check_unknown_flags(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        threads = resolve_threads(args.threads)
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, threads)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except (DepthNerfError, OSError, ValueError, KeyError) as exc:
        print(f"depthnerf: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
