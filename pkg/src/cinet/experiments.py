"""Synthetic benchmark: the 60/15/15 dataset, the training recipe, and a result cache.

Preparing 90 clouds of ~20K points and training on them takes minutes, so
prepared clouds and benchmark results are cached under ``cache_dir``. Cache
keys include a hash of the package sources, so editing any module
invalidates them.
"""

import hashlib
import json
import logging
import os
import pickle
import time
from dataclasses import replace
from pathlib import Path

from cinet.pipeline import ABLATION_METRICS, TrainConfig, evaluate, prepare_clouds, run_ablation, train
from cinet.synthetic import DatasetSpec, GeneratorConfig, dataset_splits, generate_cloud

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("CINET_CACHE", Path(__file__).resolve().parents[2] / ".cache"))


def benchmark_generator(seed: int = 0) -> GeneratorConfig:
    """90 clouds (60 train, 15 val, 15 test) on the default 10x8 mm board, ~20K points each."""
    return GeneratorConfig(DatasetSpec(n_clouds=90, seed=seed, n_train=60, n_val=15, n_test=15))


def benchmark_config(**overrides) -> TrainConfig:
    # Random crops of 256 groups keep a step cheap; two crops per step and
    # 60 clouds give 30 steps per epoch.
    base = TrainConfig(lr=0.003, epochs=50, batch_size=2, positive_weight=2.0, d_model=32, d_latent=32,
                       n_groups=1024, group_k=32, crop_groups=256, lr_schedule="cosine", embed_bias_std=1.0,
                       val_every=5)
    return replace(base, **overrides)


PREP_MODULES = ("config", "geometry", "gmm", "io", "pipeline", "quality", "structural", "synthetic")


def source_hash(modules=None) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if modules is not None and path.stem not in modules:
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def benchmark_data(gen: GeneratorConfig | None = None, n_groups: int = 1024, group_k: int = 32, jobs: int = 1,
                   cache_dir=DEFAULT_CACHE) -> dict:
    """Prepared clouds per split, generated on first use and then read from cache.

    ``seconds`` holds the wall-clock of the original generate+prepare pass.
    """
    gen = gen or benchmark_generator()
    path = Path(cache_dir) / f"preps-{_key(gen.to_ini(), n_groups, group_k, source_hash(PREP_MODULES))}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    t = time.perf_counter()
    splits = dataset_splits(gen)
    clouds = [generate_cloud(gen, i) for i in range(len(splits))]
    preps = prepare_clouds(clouds, n_groups, group_k, jobs)
    out = {s: [p for p, sp in zip(preps, splits) if sp == s] for s in ("train", "val", "test")}
    out["seconds"] = time.perf_counter() - t
    log.info("prepared %d clouds in %.1f s", len(preps), out["seconds"])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(out, fh)
    os.replace(tmp, path)
    return out


def _cached(name: str, key: str, cache_dir, compute):
    path = Path(cache_dir) / f"{name}-{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    result = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def run_benchmark(config: TrainConfig | None = None, gen: GeneratorConfig | None = None, jobs: int = 1,
                  cache_dir=DEFAULT_CACHE, use_cache: bool = True) -> dict:
    """Train on the benchmark and report test metrics plus wall-clock times."""
    config = config or benchmark_config()
    gen = gen or benchmark_generator()

    def compute():
        data = benchmark_data(gen, config.n_groups, config.group_k, jobs, cache_dir)
        model, rep = train(data["train"], data["val"], config)
        test = evaluate(data["test"], model).summary()
        return {"test": test, "val_miou": rep.val_miou, "train_loss": rep.train_loss, "best_epoch": rep.best_epoch,
                "epochs": rep.epochs_completed, "train_seconds": rep.wall_clock, "prep_seconds": data["seconds"],
                "n_points": [p.n_points for s in ("train", "val", "test") for p in data[s]]}

    if not use_cache:
        return compute()
    return _cached("bench", _key(config.as_dict(), gen.to_ini(), source_hash()), cache_dir, compute)


def run_variant_ablation(config: TrainConfig | None = None, seeds=(0, 1, 2), gen: GeneratorConfig | None = None,
                         jobs: int = 1, cache_dir=DEFAULT_CACHE) -> dict:
    """Module ablation (5 variants) over seeds; returns name -> {metric: [per seed]}."""
    config = config or benchmark_config()
    gen = gen or benchmark_generator()

    def compute():
        data = benchmark_data(gen, config.n_groups, config.group_k, jobs, cache_dir)
        rows = run_ablation(data["train"], data["val"], data["test"], config, seeds=list(seeds), tables=["variants"],
                            progress=lambda *a: log.info("ablation %s", a))
        return {r["name"]: {m: r["values"][m] for m in ABLATION_METRICS} for r in rows}

    return _cached("ablation", _key(config.as_dict(), list(seeds), gen.to_ini(), source_hash()), cache_dir, compute)
