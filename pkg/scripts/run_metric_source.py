#!/usr/bin/env python3
"""Metric-batch source comparison: same minibatch vs disjoint train batch vs
unlabeled pool, identical seeds otherwise.

Writes same_batch.csv / disjoint_batch.csv / unlabeled.csv to --out; render
with:

    python plots/plots.py --kind metric-source \
        --csv OUT/same_batch.csv OUT/disjoint_batch.csv OUT/unlabeled.csv \
        --labels same disjoint unlabeled --out OUT/metric_source
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from natgrad.cli import serialize_config
from natgrad.experiments import RunConfig, metric_source_experiment, resolve_config


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/metric_source")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=300)
    args = parser.parse_args()

    cfg = resolve_config(
        RunConfig(
            dataset_kind="classification",
            dataset_seed=args.seed,
            dataset_n=2000,
            dataset_d=20,
            dataset_k=4,
            dataset_sep=2.5,
            model_dims=(20, 64, 4),
            model_acts=("sigmoid", "softmax"),
            model_init_seed=args.seed + 50,
            run_steps=args.steps,
            run_eval_every=25,
            run_seed=args.seed,
            run_out_dir=args.out,
        )
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(serialize_config(cfg))
    logs = metric_source_experiment(cfg, out)
    for name, records in sorted(logs.items()):
        print(
            f"{name}: final train {records[-1].train_loss:.4f} "
            f"held-out {records[-1].valid_loss:.4f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
