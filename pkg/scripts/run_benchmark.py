"""Train the full model on the 60/15/15 synthetic benchmark and print test metrics.

    python3 scripts/run_benchmark.py [--jobs 4] [--no-cache] [--set key=value ...]
"""

import argparse
import json
import logging

from cinet.config import from_mapping
from cinet.experiments import benchmark_config, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--jobs", type=int, default=1, help="processes for cloud preparation")
    ap.add_argument("--no-cache", action="store_true", help="retrain even if a cached result exists")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a training option")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = dict(kv.split("=", 1) for kv in args.set)
    cfg = from_mapping(type(benchmark_config()), overrides, base=benchmark_config())
    r = run_benchmark(cfg, jobs=args.jobs, use_cache=not args.no_cache)
    print(json.dumps(r["test"], indent=1))
    print(f"val mIoU by epoch: {[round(v, 4) for v in r['val_miou'] if v == v]}")
    print(f"best epoch {r['best_epoch']}, prep {r['prep_seconds']:.0f}s, train {r['train_seconds']:.0f}s")


if __name__ == "__main__":
    main()
