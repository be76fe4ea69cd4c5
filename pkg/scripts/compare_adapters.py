"""Linear vs deep adapter on the nonlinear shift across warp exponents.

    python scripts/compare_adapters.py --seeds 0 1 --gammas 2 4 6

Stage I runs once per seed; each gamma reuses the trained classifier. Prints
one row per (seed, gamma) and writes the rows as CSV when ``--csv`` is given.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from driftbench import experiment as ex


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--gammas", type=float, nargs="+", default=[2.0, 4.0])
    p.add_argument("--csv", type=Path)
    p.add_argument("--config", type=Path, help="JSON overrides for ExperimentConfig fields (seed excluded)")
    return p.parse_args()


def main():
    args = parse_args()
    overrides = json.loads(args.config.read_text()) if args.config else {}
    fields = ["seed", "gamma", "source_acc", "pre_acc", "linear_acc", "deep_acc", "linear_mu", "deep_mu"]
    rows = []
    writer = csv.DictWriter(sys.stdout, fields, delimiter="\t")
    writer.writeheader()
    for seed in args.seeds:
        cfg = ex.ExperimentConfig.from_dict(dict(overrides, seed=seed))
        stage = ex.prepare_source(cfg)
        for gamma in args.gammas:
            o = ex.run_shift(stage, cfg.shift("nonlinear", gamma=gamma), ("linear", "deep"))
            lin, deep = o.adapted["linear"], o.adapted["deep"]
            row = {
                "seed": seed, "gamma": gamma, "source_acc": round(stage.source_accuracy, 2),
                "pre_acc": round(o.pre_accuracy, 2), "linear_acc": round(lin.accuracy, 2),
                "deep_acc": round(deep.accuracy, 2), "linear_mu": round(lin.losses.mean, 4),
                "deep_mu": round(deep.losses.mean, 4),
            }
            writer.writerow(row)
            sys.stdout.flush()
            rows.append(row)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            out = csv.DictWriter(fh, fields)
            out.writeheader()
            out.writerows(rows)


if __name__ == "__main__":
    main()
