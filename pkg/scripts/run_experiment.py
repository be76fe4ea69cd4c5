"""Run the synthetic shift experiment for several seeds and write every report.

    python scripts/run_experiment.py --seeds 0 1 2 3 4 --out runs/experiment

Each seed gets its own directory with train logs, pre/post divergence JSON and
loss histograms; ``results.json`` at the top collects the per-seed summaries.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from driftbench import experiment as ex


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", type=Path, default=Path("runs/experiment"))
    p.add_argument("--config", type=Path, help="JSON overrides for ExperimentConfig fields (seed excluded)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p.parse_args()


def main():
    args = parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    overrides = json.loads(args.config.read_text()) if args.config else {}
    results = []
    for seed in args.seeds:
        cfg = ex.ExperimentConfig.from_dict(dict(overrides, seed=seed))
        start = time.perf_counter()
        stage, outcomes = ex.run_seed(cfg)
        ex.write_reports(args.out / f"seed_{seed}", stage, outcomes)
        summary = ex.summarize(stage, outcomes)
        summary["wall_seconds"] = round(time.perf_counter() - start, 1)
        results.append(summary)
        logging.info("seed %d: source %.1f%%, %.0f s", seed, stage.source_accuracy, summary["wall_seconds"])
        for name, o in outcomes.items():
            post = ", ".join(f"{k} {a.accuracy:.1f}%" for k, a in o.adapted.items())
            logging.info("  %-9s pre %.1f%% mu %.3f | %s", name, o.pre_accuracy, o.pre_losses.mean, post)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
