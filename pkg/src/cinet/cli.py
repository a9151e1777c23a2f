"""Command line entry point: ``cinet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

log = logging.getLogger("cinet")

SUBCOMMANDS = ("generate", "assess", "fit-gmm", "train", "eval", "ablate", "dump-embeddings")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _seed_default():
    env = os.environ.get("CINET_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CINET_SEED must be an integer, got {env!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cinet", description="Causal-intervention defect segmentation for point clouds.")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for per-cloud stages (1 = deterministic)")
        sp.add_argument("--seed", type=int, default=None, help="global seed (falls back to $CINET_SEED)")
        if out:
            sp.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")

    g = sub.add_parser("generate", help="write a synthetic dataset (train/ val/ test/ + manifest.csv)")
    g.add_argument("--config", help="generator INI file ([dataset] [substrate] [defects] [artifacts])")
    g.add_argument("--n-clouds", type=int)
    common(g)

    a = sub.add_parser("assess", help="quality features (and mixture density) per cloud as CSV")
    a.add_argument("--data", required=True, help="dataset directory, split directory or single cloud file")
    a.add_argument("--split", default=None, help="restrict to one split of a dataset directory")
    a.add_argument("--gmm", help="mixture file from fit-gmm; without it one is fitted to the assessed clouds")
    a.add_argument("--components", type=int, default=0, help="mixture size when fitting (0 = choose by BIC)")
    common(a)

    f = sub.add_parser("fit-gmm", help="fit the confounder mixture to quality features of a split")
    f.add_argument("--data", required=True)
    f.add_argument("--split", default="train")
    f.add_argument("--components", type=int, default=0, help="0 = choose by BIC (K <= 5)")
    common(f)

    t = sub.add_parser("train", help="train a model; writes model.ckpt and train_log.csv")
    t.add_argument("--config", help="INI file with TrainConfig keys (key = value)")
    t.add_argument("--data", required=True)
    _train_flags(t)
    common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics.csv and per-cloud prediction PLYs")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("plugin", "marginalize"), help="override the model's intervention mode")
    e.add_argument("--no-clouds", action="store_true", help="skip writing prediction PLY files")
    common(e)

    b = sub.add_parser("ablate", help="module and quality-feature ablations; writes ablation.csv/.md")
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--seeds", type=int, default=3, help="number of seeds (0..seeds-1, offset by --seed)")
    b.add_argument("--table", choices=("all", "variants", "features"), default="all")
    _train_flags(b)
    common(b)

    d = sub.add_parser("dump-embeddings", help="group embeddings with majority labels as CSV")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test")
    common(d)
    return p


def _train_flags(sp):
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--d-model", type=int)
    sp.add_argument("--intervention", choices=("plugin", "marginalize"))
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="any TrainConfig field; may be repeated")


def _resolve_train_config(args):
    from cinet.config import from_mapping, read_ini
    from cinet.pipeline import TrainConfig

    cfg = TrainConfig()
    if args.config:
        sections = read_ini(args.config, default_section="train")
        cfg = from_mapping(TrainConfig, sections.get("train", {}), base=cfg)
    flags = {}
    for key in ("epochs", "lr", "batch_size", "d_model", "intervention", "seed", "jobs"):
        val = getattr(args, key, None)
        if val is not None:
            flags[key] = val
    if flags.get("d_model") is not None:
        flags.setdefault("d_latent", flags["d_model"])
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip().replace("-", "_")] = val.strip()
    return from_mapping(TrainConfig, {k: str(v) if not isinstance(v, str) else v for k, v in flags.items()}, base=cfg)


def _log_config(name: str, mapping: dict, out_dir: str | None = None):
    lines = [f"{k} = {v}" for k, v in mapping.items()]
    log.info("resolved %s configuration:\n  %s", name, "\n  ".join(lines))
    if out_dir:
        with open(os.path.join(out_dir, f"resolved_{name}.ini"), "w") as fh:
            fh.write(f"[{name}]\n" + "\n".join(lines) + "\n")


def _load_clouds(data: str, split: str | None):
    from cinet.io import load_point_cloud
    from cinet.synthetic import load_split

    if os.path.isfile(data):
        c = load_point_cloud(data)
        from dataclasses import replace

        return [replace(c, source_id=os.path.splitext(os.path.basename(data))[0])]
    if not os.path.isdir(data):
        raise FileNotFoundError(f"data path not found: {data}")
    if split:
        return load_split(data, split)
    subdirs = [s for s in ("train", "val", "test") if os.path.isdir(os.path.join(data, s))]
    if subdirs:
        return [c for s in subdirs for c in load_split(data, s)]
    return load_split(os.path.dirname(data.rstrip("/")) or ".", os.path.basename(data.rstrip("/")))


# ----------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    from cinet.synthetic import generate_dataset, load_generator_config

    cfg = load_generator_config(args.config)
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    if args.n_clouds is not None:
        cfg.dataset.n_clouds = args.n_clouds
        cfg.dataset.n_train = cfg.dataset.n_val = cfg.dataset.n_test = -1
    os.makedirs(args.out, exist_ok=True)
    log.info("resolved generator configuration:\n%s", cfg.to_ini())
    rows = generate_dataset(cfg, args.out, jobs=args.jobs)
    log.info("wrote %d clouds to %s", len(rows), args.out)


def _write_assessment(path, ids, q, gmm):
    from cinet.gmm import gmm_density, gmm_responsibilities

    dens = gmm_density(gmm, q) if gmm is not None else None
    gam = gmm_responsibilities(gmm, q) if gmm is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["id", "c_density", "c_uniformity", "c_integrity"]
        if gmm is not None:
            head += ["gmm_density"] + [f"gamma_{k + 1}" for k in range(gmm.n_components)]
        w.writerow(head)
        for i, cid in enumerate(ids):
            row = [cid] + [f"{v:.17g}" for v in q[i]]
            if gmm is not None:
                row += [f"{dens[i]:.17g}"] + [f"{v:.17g}" for v in gam[i]]
            w.writerow(row)


def _quality_matrix(clouds, jobs):
    from cinet.quality import quality_vector

    if jobs > 1 and len(clouds) > 1:
        from joblib import Parallel, delayed

        feats = Parallel(n_jobs=jobs)(delayed(quality_vector)(c) for c in clouds)
    else:
        feats = [quality_vector(c) for c in clouds]
    return np.stack([f.as_array() for f in feats])


def _fit(q, components, seed):
    from cinet.gmm import gmm_fit, select_components_bic

    k = components or select_components_bic(q, K_max=min(5, q.shape[0]))
    fits = [gmm_fit(q, k, seed=seed * 3 + s) for s in range(3)]
    return max(fits, key=lambda m: m.log_likelihood)


def cmd_assess(args):
    from cinet.gmm import load_gmm

    clouds = _load_clouds(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    q = _quality_matrix(clouds, args.jobs)
    if args.gmm:
        gmm = load_gmm(args.gmm)
    elif len(clouds) >= 2:
        gmm = _fit(q, args.components, args.seed or 0)
    else:
        gmm = None
        log.warning("a single cloud cannot support a mixture fit; gmm columns omitted")
    _write_assessment(os.path.join(args.out, "quality.csv"), [c.source_id for c in clouds], q, gmm)


def cmd_fit_gmm(args):
    from cinet.gmm import bic, save_gmm

    clouds = _load_clouds(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    q = _quality_matrix(clouds, args.jobs)
    gmm = _fit(q, args.components, args.seed or 0)
    save_gmm(gmm, os.path.join(args.out, "gmm.txt"))
    log.info("K=%d log-likelihood %.6f BIC %.6f", gmm.n_components, gmm.log_likelihood, bic(gmm, q.shape[0]))


def cmd_train(args):
    from cinet.pipeline import train

    cfg = _resolve_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    _log_config("train", cfg.as_dict(), args.out)
    tr, va = _load_clouds(args.data, "train"), _load_clouds(args.data, "val")
    ckpt = os.path.join(args.out, "model.ckpt")
    model, rep = train(tr, va, cfg, checkpoint_path=ckpt)
    with open(os.path.join(args.out, "train_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_miou"])
        for i, (l, v) in enumerate(zip(rep.train_loss, rep.val_miou), 1):
            w.writerow([i, f"{l:.17g}", f"{v:.17g}"])
    log.info("best epoch %d, val mIoU %.4f; checkpoint %s", rep.best_epoch, np.nanmax(rep.val_miou), ckpt)


def cmd_eval(args):
    from cinet.io import save_point_cloud
    from cinet.metrics import export_report
    from cinet.pipeline import evaluate, load_checkpoint

    if not os.path.isfile(args.model):
        raise FileNotFoundError(f"model checkpoint not found: {args.model}")
    model = load_checkpoint(args.model)
    clouds = _load_clouds(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    _log_config("eval", {"model": args.model, "data": args.data, "split": args.split,
                         "mode": args.mode or model.intervention}, args.out)
    res = evaluate(clouds, model, mode=args.mode, return_predictions=True)
    export_report(res.report, os.path.join(args.out, "metrics.csv"))
    if not args.no_clouds:
        pdir = os.path.join(args.out, "predictions")
        os.makedirs(pdir, exist_ok=True)
        for c in clouds:
            pr = res.predictions[c.source_id]
            save_point_cloud(c, os.path.join(pdir, c.source_id + ".ply"),
                             extra={"prob": pr.prob, "pred": pr.pred()})
    s = res.report.summary()
    log.info("mIoU %.4f  mAP %.4f  mAcc %.4f  OA %.4f", s["miou"], s["map"], s["macc"], s["oa"])


def cmd_ablate(args):
    from cinet.pipeline import run_ablation, write_ablation

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = _resolve_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    _log_config("ablate", {**cfg.as_dict(), "seeds": args.seeds, "table": args.table}, args.out)
    base = cfg.seed
    seeds = [base + i for i in range(args.seeds)]
    rows = run_ablation(_load_clouds(args.data, "train"), _load_clouds(args.data, "val"),
                        _load_clouds(args.data, "test"), cfg, seeds, tables=None if args.table == "all" else (args.table,),
                        progress=lambda t, n, s, m: log.info("%s / %s seed %d: mIoU %.4f", t, n, s, m["miou"]))
    write_ablation(rows, os.path.join(args.out, "ablation.csv"), os.path.join(args.out, "ablation.md"))


def cmd_dump_embeddings(args):
    from cinet.pipeline import load_checkpoint
    from cinet.structural import encode_structure

    if not os.path.isfile(args.model):
        raise FileNotFoundError(f"model checkpoint not found: {args.model}")
    model = load_checkpoint(args.model)
    clouds = _load_clouds(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "embeddings.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = model.encoder.d_model
        w.writerow(["cloud", "group", "label"] + [f"e{i}" for i in range(d)])
        for c in clouds:
            prep = model.prepare(c)
            rows = encode_structure(prep.structure, model.encoder).rows.data
            members = prep.structure.groups.members
            lab = (2 * c.labels[members].sum(axis=1) >= members.shape[1]).astype(int) if c.labels is not None \
                else np.zeros(rows.shape[0], dtype=int)
            for gi in range(rows.shape[0]):
                w.writerow([c.source_id, gi, lab[gi]] + [f"{v:.17g}" for v in rows[gi]])


COMMANDS = {"generate": cmd_generate, "assess": cmd_assess, "fit-gmm": cmd_fit_gmm, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "dump-embeddings": cmd_dump_embeddings}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if getattr(args, "seed", None) is None and hasattr(args, "seed"):
            args.seed = _seed_default()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cinet {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cinet {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
