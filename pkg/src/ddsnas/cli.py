"""Command-line entry point: ``ddsnas <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import pipeline
from .autoencoder import EncoderDecoder, clustering_score, embed_dataset, train_autoencoder
from .config import dump_config, load_config, save_config, schema_lines
from .data import save_dataset
from .embeddings import read_ddse, write_ddse
from .errors import ConfigError
from .fsutil import atomic_write_text
from .index import build_index

log = logging.getLogger("ddsnas")

SUBCOMMANDS = ("gen-data", "train-ae", "embed", "build-index", "search", "ablate", "bench-refresh", "report")


class _Parser(argparse.ArgumentParser):
    """Argument errors count as configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _schema_epilog():
    return "configuration keys (override with --set key=value):\n  " + "\n  ".join(schema_lines())


def _common(p):
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, repeatable")
    p.add_argument("--seed", type=int, help="run seed (same as --set seed=N)")
    p.add_argument("--out", help="output directory (same as --set output_dir=DIR)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="ddsnas", description="Curriculum-driven architecture search.",
                     epilog=_schema_epilog(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "gen-data": "write the synthetic train/test sets as binary dataset files",
        "train-ae": "train the autoencoder and save its weights",
        "embed": "embed the training set and write embeddings.ddse",
        "build-index": "build the per-class furthest-neighbour trees and print statistics",
        "search": "run one architecture search",
        "ablate": "run full / untrained-autoencoder / fixed-subset over several seeds",
        "bench-refresh": "time one subset refresh against one global training epoch",
        "report": "summarise a run or ablation directory",
    }
    cmds = {}
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name], epilog=_schema_epilog(),
                           formatter_class=fmt)
        cmds[name] = p
        if name != "report":
            _common(p)
    cmds["embed"].add_argument("--model", help="trained autoencoder (.npz); default trains one, "
                                               "or uses a random encoder in untrained-autoencoder mode")
    cmds["build-index"].add_argument("--embeddings", help="embedding file; default embeds the training set")
    cmds["ablate"].add_argument("--seeds", type=int, default=5, help="number of seeds (0..N-1)")
    cmds["ablate"].add_argument("--jobs", type=int, default=1, help="parallel worker runs")
    cmds["bench-refresh"].add_argument("--n", type=int, default=50000, help="records in the index")
    cmds["bench-refresh"].add_argument("--subset", type=int, default=1000, help="subset size S")
    cmds["bench-refresh"].add_argument("--epoch-fraction", type=float, default=1.0,
                                       help="share of the global epoch to time (extrapolated)")
    cmds["report"].add_argument("run_dir", help="directory written by search or ablate")
    cmds["report"].add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)
    sys.stdout.write("# resolved configuration\n" + dump_config(cfg))
    sys.stdout.flush()
    return cfg


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=False))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg, args):
    train, test = pipeline.raw_data(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    paths = {"train": os.path.join(cfg.output_dir, "train.ddsd"), "test": os.path.join(cfg.output_dir, "test.ddsd")}
    save_dataset(paths["train"], train)
    save_dataset(paths["test"], test)
    save_config(os.path.join(cfg.output_dir, "config.yaml"), cfg)
    _print_json({k: {"path": v, "count": len(d)} for (k, v), d in zip(paths.items(), (train, test))})


def cmd_train_ae(cfg, args):
    train, _ = pipeline.load_data(cfg)
    rng = pipeline.stream(cfg.seed, "autoencoder")
    acfg = pipeline.autoencoder_config(cfg)
    model = EncoderDecoder(int(np.prod(train.shape)), acfg.bottleneck, acfg.hidden, rng=rng)
    model, tlog = train_autoencoder(train.flat(), train.labels, acfg, rng=rng, model=model)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "autoencoder.npz")
    model.save(path)
    rows = "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(tlog.epoch_loss))
    atomic_write_text(os.path.join(cfg.output_dir, "autoencoder_loss.csv"), "epoch,loss\n" + rows)
    save_config(os.path.join(cfg.output_dir, "config.yaml"), cfg)
    _print_json({"model": path, "final_loss": tlog.epoch_loss[-1] if tlog.epoch_loss else None})


def _embeddings(cfg, model_path=None):
    train, _ = pipeline.load_data(cfg)
    if model_path:
        model = EncoderDecoder.load(model_path)
        if model.input_dim != int(np.prod(train.shape)):
            raise ConfigError(f"model input size {model.input_dim} does not match the dataset")
        return embed_dataset(model, train.flat(), train.labels).as_float32()
    emb, _ = pipeline.compute_embeddings(cfg, train, trained=cfg.mode != "untrained-autoencoder")
    return emb


def cmd_embed(cfg, args):
    emb = _embeddings(cfg, args.model)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "embeddings.ddse")
    write_ddse(path, emb)
    _print_json({"embeddings": path, "count": len(emb), "dim": emb.dim, "clustering_score": clustering_score(emb)})


def cmd_build_index(cfg, args):
    emb = read_ddse(args.embeddings) if args.embeddings else _embeddings(cfg)
    index = build_index(emb, leaf_size=cfg.index.leaf_size)
    stats = {"records": index.total, "dim": index.dim, "classes": {}}
    for c, tree in sorted(index.trees.items()):
        stats["classes"][str(c)] = {"size": tree.size, "leaves": tree.n_leaves, "depth": int(tree.depth)}
    os.makedirs(cfg.output_dir, exist_ok=True)
    atomic_write_text(os.path.join(cfg.output_dir, "index_stats.json"), json.dumps(stats, indent=2) + "\n")
    _print_json(stats)


def cmd_search(cfg, args):
    d, metrics = pipeline.run_search(cfg)
    _print_json(metrics.summary())


def cmd_ablate(cfg, args):
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    rows, medians = pipeline.run_ablation_suite(cfg, list(range(args.seeds)), jobs=args.jobs)
    sys.stdout.write(pipeline.ablation_csv(rows))
    _print_json(medians)


def cmd_bench_refresh(cfg, args):
    if args.n < cfg.data.n_classes or args.subset < 0 or not 0 < args.epoch_fraction <= 1:
        raise ConfigError("bench-refresh needs --n >= n_classes, --subset >= 0, 0 < --epoch-fraction <= 1")
    rep = pipeline.measure_refresh_overhead(cfg, n_index=args.n, subset_size=args.subset,
                                            epoch_fraction=args.epoch_fraction)
    os.makedirs(cfg.output_dir, exist_ok=True)
    atomic_write_text(os.path.join(cfg.output_dir, "bench_refresh.json"), json.dumps(rep, indent=2) + "\n")
    _print_json(rep)


CURVE_COLUMNS = ["epoch", "subset_accuracy", "mean_hardness", "lr", "train_loss", "val_loss", "unique_visited"]


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def report(run_dir, out=None):
    """Print a summary of ``run_dir`` and write ``curves.csv`` next to its metrics.

    An ablation directory (with ``ablation.csv``) is summarised per mode
    instead.  Raises ``FileNotFoundError`` when no metrics are present.
    """
    out = out or sys.stdout
    abl = os.path.join(run_dir, "ablation.csv")
    if os.path.exists(abl):
        rows = _read_csv(abl)
        out.write(f"{'mode':<24}{'runs':>5}{'search acc':>12}{'fine-tune acc':>15}{'params':>9}{'search s':>10}\n")
        for mode in dict.fromkeys(r["mode"] for r in rows):
            ms = [r for r in rows if r["mode"] == mode]
            med = {k: float(np.median([float(r[k]) for r in ms]))
                   for k in ("search_accuracy", "finetune_accuracy", "param_count", "search_seconds")}
            out.write(f"{mode:<24}{len(ms):>5}{med['search_accuracy']:>12.4f}{med['finetune_accuracy']:>15.4f}"
                      f"{int(med['param_count']):>9}{med['search_seconds']:>10.1f}\n")
        return rows
    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no metrics.csv or ablation.csv in {run_dir}")
    rows = _read_csv(path)
    summary = {}
    spath = os.path.join(run_dir, "summary.json")
    if os.path.exists(spath):
        with open(spath) as f:
            summary = json.load(f)
    curves = "".join(",".join(r[k] for k in CURVE_COLUMNS) + "\n" for r in rows)
    atomic_write_text(os.path.join(run_dir, "curves.csv"), ",".join(CURVE_COLUMNS) + "\n" + curves)
    refreshes = sum(int(r["refresh"]) for r in rows)
    out.write(f"run: {run_dir}\n")
    if summary:
        out.write(f"mode: {summary['mode']}  seed: {summary['seed']}\n")
        out.write(f"search-phase accuracy: {summary['search_accuracy']:.4f}\n")
        out.write(f"fine-tune accuracy: {summary['finetune_accuracy']:.4f}\n")
        out.write(f"discrete parameters: {summary['param_count']}\n")
        out.write(f"search seconds: {summary['search_seconds']:.1f}\n")
    out.write(f"epochs: {len(rows)}  refreshes: {refreshes}  unique samples visited: "
              f"{rows[-1]['unique_visited'] if rows else 0}\n")
    out.write(f"curves: {os.path.join(run_dir, 'curves.csv')}\n")
    return rows


def cmd_report(args):
    report(args.run_dir)


HANDLERS = {"gen-data": cmd_gen_data, "train-ae": cmd_train_ae, "embed": cmd_embed,
            "build-index": cmd_build_index, "search": cmd_search, "ablate": cmd_ablate,
            "bench-refresh": cmd_bench_refresh}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
        else:
            cfg = resolve_config(args)
            HANDLERS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
