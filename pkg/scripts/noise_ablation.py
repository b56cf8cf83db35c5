"""Held-out PSNR after fixed-budget training as the depth noise grows."""
import argparse
import logging
import time

from depthnerf.experiments import NOISE_FRACTIONS, AblationConfig, run_depth_noise_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=float, nargs="+", default=list(NOISE_FRACTIONS))
    ap.add_argument("--iterations", type=int, default=AblationConfig.iterations)
    ap.add_argument("--csv", help="optional output CSV")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = AblationConfig(iterations=args.iterations)
    start = time.perf_counter()
    rows = run_depth_noise_ablation(
        cfg.scene(), args.levels, cfg.train_config(args.seed), cfg.field_config(), seed=args.seed, csv_path=args.csv
    )
    for row in rows:
        print(f"noise {row['noise_fraction']:>6g} x radius: PSNR {row['PSNR']:.2f} dB, SSIM {row['SSIM']:.4f}")
    print(f"elapsed {(time.perf_counter() - start) / 60:.1f} min")


if __name__ == "__main__":
    main()
