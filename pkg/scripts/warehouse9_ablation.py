"""Exact vs the two undecomposed baselines on the 9-agent warehouse.

Writes one result directory per variant and prints the final-20% statistic
plus the smoothed mean at epoch 2000.
"""

import argparse

import numpy as np

from structured_marl.cli import ExperimentSpec, cmd_train, parse_seeds

p = argparse.ArgumentParser()
p.add_argument("--seeds", default="0..4")
p.add_argument("--epochs", type=int, default=3500)
p.add_argument("--out", default="results/warehouse9")
p.add_argument("--variants", default="exact,undecq,undecqhat")
args = p.parse_args()

for variant in args.variants.split(","):
    b = cmd_train(ExperimentSpec("warehouse9", variant, parse_seeds(args.seeds), args.epochs,
                                 f"{args.out}/{variant}"))
    mean, std = b.final20()
    at = min(1999, args.epochs - 1)
    mid = np.mean([r.smoothed_return[at] for r in b.ok]) if b.ok else float("nan")
    print(f"{variant:10s} final-20% {mean:8.3f} +- {std:.3f}   epoch {at + 1}: {mid:8.3f}   "
          f"failed {b.failed_seeds}")
