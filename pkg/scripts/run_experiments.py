#!/usr/bin/env python3
"""Run the repair experiments and write metrics under an output directory.

Each experiment gets its own subdirectory with metrics.csv, config.txt,
counters.txt, box-plot data files, and per-trial observation logs.
"""

import argparse
import sys
import time

from cpzrepair.harness import ExperimentConfig, run_experiment

ALL = ("param", "missing", "multiple")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("experiments", nargs="*", choices=ALL,
                    help="which experiments to run (default: all three)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, help="override the per-experiment default")
    ap.add_argument("--budget-s", type=float, dest="budget_s")
    ap.add_argument("--budget-edits", type=int, dest="budget_edits",
                    help="use a deterministic edit-count budget instead of wall time")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    overrides = {k: v for k, v in (
        ("seed", args.seed), ("trials", args.trials),
        ("budget_s", args.budget_s), ("budget_edits", args.budget_edits))
        if v is not None}
    for exp in args.experiments or ALL:
        cfg = ExperimentConfig.defaults(exp, out=f"{args.out}/{exp}", **overrides)
        t0 = time.perf_counter()
        paths = run_experiment(cfg)
        dt = time.perf_counter() - t0
        print(f"{exp}: {dt:.1f}s -> {paths['metrics']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
