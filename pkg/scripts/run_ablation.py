"""Module ablation (baseline, +SR, +QA, +MAD, full) over three seeds on the synthetic benchmark.

    python3 scripts/run_ablation.py [--seeds 0 1 2] [--epochs 50]
"""

import argparse
import logging

import numpy as np

from cinet.experiments import benchmark_config, run_variant_ablation
from cinet.pipeline import ABLATION_METRICS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_variant_ablation(benchmark_config(epochs=args.epochs), seeds=args.seeds, jobs=args.jobs)
    print("| row | " + " | ".join(ABLATION_METRICS) + " |")
    print("|---|" + "---|" * len(ABLATION_METRICS))
    for name, vals in res.items():
        cells = [f"{np.mean(vals[m]):.4f} ± {np.std(vals[m], ddof=1) if len(vals[m]) > 1 else 0:.4f}"
                 for m in ABLATION_METRICS]
        print(f"| {name} | " + " | ".join(cells) + " |")


if __name__ == "__main__":
    main()
