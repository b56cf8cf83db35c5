"""Two-sphere training with and without depth conditioning; reports held-out PSNR.

The full-size default (64 px, patch 64, 10k iterations) takes many hours per
model on one core; ``--size 32 --patch 8`` gives a quick look.
"""
import argparse
import logging

from depthnerf.experiments import MODEL_LENGTH_UNIT
from depthnerf.field import FieldConfig
from depthnerf.objective import ObjectiveConfig
from depthnerf.sampling import SamplingConfig
from depthnerf.scene import preset_scene
from depthnerf.training import TrainConfig, prepare_scene, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--iterations", type=int, default=10_000)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--lr-final", type=float, default=None)
    ap.add_argument("--patch", type=int, default=64)
    ap.add_argument("--eval-every", type=int, default=1000)
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    train = TrainConfig(
        iterations=args.iterations, lr=args.lr, lr_final=args.lr_final, patch=args.patch, eval_every=args.eval_every,
        objective=ObjectiveConfig(patch_size=args.patch, ab_downsample_k=min(8, args.patch)),
    )
    data = prepare_scene(preset_scene("two-spheres", args.size, args.size), 0.0, 0, SamplingConfig(), train.n_train_views)
    for depth_on in (True, False):
        cfg = FieldConfig(pad=args.size // 4, depth_conditioning=depth_on, length_unit=MODEL_LENGTH_UNIT)
        run_id = "depth" if depth_on else "no_depth"
        result = run_training(data, cfg, train, args.out_dir, run_id)
        print(f"{run_id}: held-out PSNR {result.evals[-1][1]['PSNR']:.2f} dB")


if __name__ == "__main__":
    main()
