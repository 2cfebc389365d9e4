"""40 thermal zones: the exact sets split the problem into two independent chains."""

import argparse

from structured_marl.cli import ExperimentSpec, cmd_deps, cmd_train, parse_seeds

p = argparse.ArgumentParser()
p.add_argument("--seeds", default="0..2")
p.add_argument("--epochs", type=int, default=5000)
p.add_argument("--variants", default="exact,kappa:1")
p.add_argument("--out", default="results/thermal40")
args = p.parse_args()

deps = cmd_deps("thermal40")
print("components:", [len(c) for c in deps["components"]])
for variant in args.variants.split(","):
    b = cmd_train(ExperimentSpec("thermal40", variant, parse_seeds(args.seeds), args.epochs,
                                 f"{args.out}/{variant.replace(':', '')}"))
    mean, std = b.final20()
    print(f"{variant:8s} final-20% {mean:10.3f} +- {std:.3f}  failed {b.failed_seeds}")
