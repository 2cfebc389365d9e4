"""Truncated dependency sets on the 40-agent warehouse ring."""

import argparse

import numpy as np

from structured_marl.cli import ExperimentSpec, cmd_train, parse_seeds

p = argparse.ArgumentParser()
p.add_argument("--kappas", default="2,4,8")
p.add_argument("--seeds", default="0..2")
p.add_argument("--epochs", type=int, default=1500)
p.add_argument("--out", default="results/warehouse40")
args = p.parse_args()

for k in (int(v) for v in args.kappas.split(",")):
    b = cmd_train(ExperimentSpec("warehouse40", f"kappa:{k}", parse_seeds(args.seeds),
                                 args.epochs, f"{args.out}/kappa{k}"))
    last = [r.smoothed_return[-1] for r in b.ok]
    print(f"kappa={k}: final smoothed {np.mean(last):.3f} +- {np.std(last):.3f}  "
          f"final-20% {b.final20()[0]:.3f}  failed {b.failed_seeds}")
