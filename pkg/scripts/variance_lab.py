"""Sweep the critic noise gap on the tabular variance instances."""

import argparse
import json

from structured_marl.cli import cmd_variance_lab

p = argparse.ArgumentParser()
p.add_argument("--samples", type=int, default=100_000)
p.add_argument("--out")
args = p.parse_args()

rows = []
for instance in ("centered", "offset"):
    for sd_q, sd_h in ((0.5, 0.5), (1.0, 0.5), (2.0, 0.0)):
        r = cmd_variance_lab({"instance": instance, "noise": [0.0, sd_q, 0.0, sd_h],
                              "n_samples": args.samples})
        rows.append(r)
        print(f"{instance:8s} sigma_Q={sd_q:.1f} sigma_Qhat={sd_h:.1f}  "
              f"gap {r['diff']:9.4f} +- {r['half_width']:.4f}  "
              f"bounds [{r['lower']:.4f}, {r['upper']:.4f}]  inside={r['in_sandwich']}")
if args.out:
    with open(args.out, "w") as f:
        json.dump(rows, f, indent=1, sort_keys=True)
