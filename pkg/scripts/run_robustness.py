#!/usr/bin/env python3
"""Robustness to reordering of the training stream: resample one segment at
a time, retrain from scratch five times, and measure the induced output
variance for minibatch SGD and natural gradient at matched validation error.

Writes variance_sgd.csv / variance_ngd.csv to --out; render with:

    python plots/plots.py --kind variance \
        --csv OUT/variance_sgd.csv OUT/variance_ngd.csv --out OUT/variance
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from natgrad.experiments import RunConfig, robustness_protocol, write_variance_csv


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/robustness")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = RunConfig(dataset_seed=args.seed, model_init_seed=args.seed + 7, run_seed=args.seed)
    sgd_curve, ngd_curve = robustness_protocol(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_variance_csv(out / "variance_sgd.csv", sgd_curve)
    write_variance_csv(out / "variance_ngd.csv", ngd_curve)
    below = int((ngd_curve.variances < sgd_curve.variances).sum())
    print(
        f"validation error: sgd {sgd_curve.valid_error:.3f}, ngd {ngd_curve.valid_error:.3f}; "
        f"ngd variance below sgd on {below}/10 segments"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
