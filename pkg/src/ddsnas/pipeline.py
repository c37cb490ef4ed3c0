"""End-to-end search runs, ablations and the refresh micro-benchmark.

A run trains (or randomly initialises) the autoencoder once, embeds the
training set, builds one furthest-neighbour tree per class, and then runs the
architecture search on a small class-balanced subset.  After every epoch the
subset is scored; once it is mastered and the warmup has passed, hard samples
are kept, easy ones are swapped for dissimilar same-class samples, and the
weight learning rate jumps back to its maximum.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import curriculum as cur
from .autoencoder import AutoencoderConfig, EncoderDecoder, clustering_score, embed_dataset, train_autoencoder
from .config import RunConfig, save_config
from .data import Dataset, SyntheticSpec, load_dataset, synthetic_dataset
from .embeddings import Embeddings, write_ddse
from .errors import ConfigError
from .fsutil import atomic_write_text
from .index import build_index
from .neuralnet import CosineLrSchedule, CyclicLrSchedule, adam_optimizer, sgd_optimizer
from .supernet import MixedArchitecture, OperationCatalog, alternating_step, count_params, discretize, fine_tune

log = logging.getLogger(__name__)

# named random sub-streams derived from the run seed
STREAMS = {"subset": 1, "autoencoder": 2, "weights": 3, "batches": 4, "finetune": 5}

METRIC_COLUMNS = ["epoch", "lr", "lr_reset", "refresh", "swapped", "retained", "subset_accuracy",
                  "mean_hardness", "train_loss", "val_loss", "unique_visited", "seconds"]
WALL_CLOCK_COLUMNS = ("seconds",)


def stream(seed, name):
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    lr_reset: int
    refresh: int
    swapped: int
    retained: int
    subset_accuracy: float
    mean_hardness: float
    train_loss: float
    val_loss: float
    unique_visited: int
    seconds: float


@dataclass
class RunMetrics:
    mode: str
    seed: int
    epochs: list = field(default_factory=list)
    search_accuracy: float = float("nan")
    finetune_accuracy: float = float("nan")
    param_count: int = 0
    search_seconds: float = 0.0
    autoencoder_seconds: float = 0.0
    finetune_seconds: float = 0.0
    refresh_count: int = 0
    unique_visited: int = 0
    stop_reason: str = ""
    clustering_score: float = float("nan")
    genotype: str = ""

    def summary(self):
        d = asdict(self)
        d.pop("epochs")
        return d


# --------------------------------------------------------------------------
# data and embeddings
# --------------------------------------------------------------------------

def raw_data(cfg):
    """``(train, test)`` as stored: pixel values in [0, 1]."""
    d = cfg.data
    if d.path:
        train = load_dataset(d.path)
        if not d.test_path:
            raise ConfigError("data.test_path is required when data.path is set")
        test = load_dataset(d.test_path)
    else:
        spec = SyntheticSpec(n_classes=d.n_classes, side=d.side, n_train=d.n_train, n_test=d.n_test,
                             noise=d.noise, max_shift=d.max_shift, dark_fraction=d.dark_fraction, seed=d.seed)
        train, test = synthetic_dataset(spec)
    return train, test


def load_data(cfg):
    """Load ``(train, test)`` and standardise both with the training-set pixel statistics."""
    train, test = raw_data(cfg)
    mean, std = float(train.images.mean()), float(train.images.std())
    return train.standardized(mean, std), test.standardized(mean, std)


def autoencoder_config(cfg):
    a = cfg.autoencoder
    return AutoencoderConfig(bottleneck=a.bottleneck, hidden=tuple(a.hidden), loss=a.loss, epochs=a.epochs,
                             batch_size=a.batch_size, lr=a.lr, betas=(a.beta1, a.beta2),
                             weight_decay=a.weight_decay, contractive_lambda=a.contractive_lambda,
                             triplet_margin=a.triplet_margin)


def compute_embeddings(cfg, train, trained=True):
    """Embed ``train`` with a trained (or untouched, randomly initialised) autoencoder.

    Vectors are rounded through float32 so that an index rebuilt from the
    written embedding file is identical to the one used in the run.
    """
    rng = stream(cfg.seed, "autoencoder")
    acfg = autoencoder_config(cfg)
    model = EncoderDecoder(int(np.prod(train.shape)), acfg.bottleneck, acfg.hidden, rng=rng)
    if trained:
        model, _ = train_autoencoder(train.flat(), train.labels, acfg, rng=rng, model=model)
    return embed_dataset(model, train.flat(), train.labels).as_float32(), model


# --------------------------------------------------------------------------
# the search loop
# --------------------------------------------------------------------------

def _gather(train, ids):
    """Rows of the training set fed to the network (single access point)."""
    ids = np.asarray(ids, dtype=np.int64)
    return train.images[ids], train.labels[ids]


def _split(subset, rng):
    perm = rng.permutation(len(subset))
    half = len(subset) // 2
    ids = np.asarray(subset, dtype=np.int64)
    return ids[perm[:half]], ids[perm[half:]]


def _schedule(cfg):
    o = cfg.optim
    if o.schedule == "cosine":
        return CosineLrSchedule(max_lr=o.max_lr, min_lr=o.base_lr, t_max=max(cfg.supernet.max_epochs, 1))
    return CyclicLrSchedule(o.base_lr, o.max_lr, o.step_size_up, o.step_size_down)


def new_supernet(cfg, train):
    rng = stream(cfg.seed, "weights")
    return MixedArchitecture(train.shape, train.n_classes, cfg.supernet.n_nodes,
                             OperationCatalog(tuple(cfg.supernet.ops)), rng=rng,
                             alpha_scale=cfg.supernet.alpha_init_scale)


def subset_feedback(arch, train, subset):
    x, y = _gather(train, subset)
    probs = arch.predict_proba(x)
    return cur.EpochFeedback(np.asarray(subset), probs[np.arange(len(y)), y], np.argmax(probs, axis=1) == y)


def search_loop(cfg, train, index=None):
    """Curriculum-driven architecture search on ``train``.

    ``index`` is the per-class tree set; ``None`` (fixed-subset mode) keeps
    the initial subset for the whole run.  Returns ``(arch, state, epochs,
    reports, stop_reason)``.
    """
    c = cfg.curriculum
    state = cur.init_subset(train.labels, c.subset_size, seed=int(stream(cfg.seed, "subset").integers(2**31)),
                            tau_mastery=c.tau_mastery, tau_hard=c.tau_hard, warmup_epochs=c.warmup_epochs,
                            history_window=c.history_window, hardness_rule=c.hardness_rule)
    arch = new_supernet(cfg, train)
    o = cfg.optim
    wopt = sgd_optimizer(lr=o.base_lr, weight_decay=o.weight_decay, momentum=o.weight_momentum)
    aopt = adam_optimizer(lr=o.arch_lr, weight_decay=o.arch_weight_decay, betas=(o.arch_beta1, o.arch_beta2))
    sched = _schedule(cfg)
    brng = stream(cfg.seed, "batches")
    w_ids, a_ids = _split(state.subset, brng)
    bs = cfg.supernet.batch_size
    epochs, reports = [], []
    best, stale = -1.0, 0
    stop = "epoch budget"
    for epoch in range(1, cfg.supernet.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr()
        wopt.lr = lr
        wp = brng.permutation(w_ids)
        ap = brng.permutation(a_ids)
        n_steps = max(1, -(-len(wp) // bs))
        tl = vl = 0.0
        for s in range(n_steps):
            tb = wp[s * bs:(s + 1) * bs]
            k = (s * bs) % max(len(ap), 1)
            vb = np.roll(ap, -k)[:bs]
            lt, lv = alternating_step(arch, _gather(train, tb), _gather(train, vb), wopt, aopt)
            tl += lt
            vl += lv
        fb = subset_feedback(arch, train, state.subset)
        acc = float(np.mean(fb.correct))
        mean_h = float(np.mean(1.0 - fb.prob_true))
        rep = cur.advance_epoch(state, fb, index)
        refreshed, swapped, retained = 0, 0, state.size
        if rep is not None:
            reports.append(rep)
            refreshed, swapped, retained = 1, len(rep.swaps), rep.retained_count
            sched.reset_to_max()
            w_ids, a_ids = _split(state.subset, brng)
        else:
            sched.step()
        epochs.append(EpochMetrics(epoch, lr, refreshed, refreshed, swapped, retained, acc, mean_h,
                                   tl / n_steps, vl / n_steps, len(state.visited), time.perf_counter() - t0))
        if refreshed:
            # a new subset starts a fresh accuracy race
            best, stale = -1.0, 0
        elif acc > best:
            best, stale = acc, 0
        else:
            stale += 1
            if stale >= cfg.supernet.patience:
                stop = f"no subset-accuracy improvement for {cfg.supernet.patience} epochs"
                break
    return arch, state, epochs, reports, stop


# --------------------------------------------------------------------------
# full runs
# --------------------------------------------------------------------------

def _csv_text(header, rows):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def metrics_csv(epochs):
    rows = [[getattr(e, k) if not isinstance(getattr(e, k), float) else repr(getattr(e, k)) for k in METRIC_COLUMNS]
            for e in epochs]
    return _csv_text(METRIC_COLUMNS, rows)


def run_search(cfg, data=None, write=True):
    """Execute one complete run; returns ``(DiscreteArchitecture, RunMetrics)``.

    ``data`` may pass a preloaded ``(train, test)`` pair.  With ``write`` the
    standard output files are produced in ``cfg.output_dir``.
    """
    cfg.validate()
    train, test = data if data is not None else load_data(cfg)
    if len(np.unique(train.labels)) != cfg.data.n_classes:
        raise ConfigError(f"dataset has {len(np.unique(train.labels))} classes, config says {cfg.data.n_classes}")
    metrics = RunMetrics(cfg.mode, cfg.seed)
    emb = index = None
    if cfg.mode != "fixed-subset":
        t0 = time.perf_counter()
        emb, _ = compute_embeddings(cfg, train, trained=cfg.mode == "full")
        metrics.autoencoder_seconds = time.perf_counter() - t0
        index = build_index(emb, leaf_size=cfg.index.leaf_size)
        metrics.clustering_score = clustering_score(emb)
    t0 = time.perf_counter()
    arch, state, epochs, reports, stop = search_loop(cfg, train, index)
    metrics.search_seconds = time.perf_counter() - t0
    metrics.epochs = epochs
    metrics.stop_reason = stop
    metrics.refresh_count = len(reports)
    metrics.unique_visited = len(state.visited)
    metrics.search_accuracy = arch.accuracy(test.images, test.labels)
    d = discretize(arch, exclude_zero=cfg.supernet.exclude_zero)
    f = cfg.finetune
    metrics.param_count = count_params(d, cells=f.cells)
    metrics.genotype = d.genotype_text()
    t0 = time.perf_counter()
    metrics.finetune_accuracy, _ = fine_tune(d, train.images, train.labels, test.images, test.labels,
                                             epochs=f.epochs, lr=f.lr, momentum=cfg.optim.weight_momentum,
                                             weight_decay=cfg.optim.weight_decay, batch_size=f.batch_size,
                                             cells=f.cells, inherit=f.inherit_weights,
                                             rng=stream(cfg.seed, "finetune"))
    metrics.finetune_seconds = time.perf_counter() - t0
    if write:
        out = cfg.output_dir
        os.makedirs(out, exist_ok=True)
        save_config(os.path.join(out, "config.yaml"), cfg)
        atomic_write_text(os.path.join(out, "metrics.csv"), metrics_csv(epochs))
        atomic_write_text(os.path.join(out, "genotype.txt"), d.genotype_text())
        cur.write_reports_csv(os.path.join(out, "replacements.csv"), reports)
        if emb is not None:
            write_ddse(os.path.join(out, "embeddings.ddse"), emb)
        atomic_write_text(os.path.join(out, "summary.json"), json.dumps(metrics.summary(), indent=2) + "\n")
    log.info("run %s seed %d: search acc %.4f, fine-tune acc %.4f, %d refreshes",
             cfg.mode, cfg.seed, metrics.search_accuracy, metrics.finetune_accuracy, metrics.refresh_count)
    return d, metrics


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

ABLATION_COLUMNS = ["mode", "seed", "search_accuracy", "finetune_accuracy", "param_count", "refresh_count",
                    "unique_visited", "clustering_score", "search_seconds"]


def _ablation_job(args):
    cfg, data = args
    _, m = run_search(cfg, data=data, write=bool(cfg.output_dir))
    return m


def run_ablation_suite(base, seeds, jobs=1, modes=("full", "untrained-autoencoder", "fixed-subset"), write=True):
    """Run every mode for every seed; returns ``(rows, medians)``.

    ``rows`` is one :class:`RunMetrics` per (mode, seed); ``medians`` maps a
    mode to its median search and fine-tune accuracy.
    """
    data = load_data(base)
    tasks = []
    for mode in modes:
        for seed in seeds:
            out = os.path.join(base.output_dir, f"{mode}-seed{seed}") if write else ""
            cfg = replace(base, mode=mode, seed=int(seed), output_dir=out)
            tasks.append((cfg, data))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_ablation_job, tasks))
    else:
        rows = [_ablation_job(t) for t in tasks]
    medians = {}
    for mode in modes:
        ms = [r for r in rows if r.mode == mode]
        medians[mode] = {
            "search_accuracy": float(np.median([r.search_accuracy for r in ms])),
            "finetune_accuracy": float(np.median([r.finetune_accuracy for r in ms])),
            "clustering_score": float(np.median([r.clustering_score for r in ms])),
        }
    if write:
        os.makedirs(base.output_dir, exist_ok=True)
        atomic_write_text(os.path.join(base.output_dir, "ablation.csv"), ablation_csv(rows))
        atomic_write_text(os.path.join(base.output_dir, "ablation_medians.json"), json.dumps(medians, indent=2) + "\n")
    return rows, medians


def ablation_csv(rows):
    return _csv_text(ABLATION_COLUMNS, [[r.mode, r.seed, repr(r.search_accuracy), repr(r.finetune_accuracy),
                                         r.param_count, r.refresh_count, r.unique_visited,
                                         repr(r.clustering_score), repr(r.search_seconds)] for r in rows])


# --------------------------------------------------------------------------
# refresh overhead
# --------------------------------------------------------------------------

def measure_refresh_overhead(cfg, n_index=50000, subset_size=1000, epoch_fraction=1.0):
    """Time one worst-case subset refresh against one training epoch over the global set.

    Every subset member is treated as easy, so all ``subset_size`` samples
    are replaced.  ``epoch_fraction`` < 1 times that share of the epoch and
    extrapolates linearly.  Returns a dict of timings (seconds) and the ratio.
    """
    m = cfg.data.n_classes
    spec = SyntheticSpec(n_classes=m, side=cfg.data.side, n_train=n_index, n_test=0, noise=cfg.data.noise,
                         max_shift=cfg.data.max_shift, dark_fraction=cfg.data.dark_fraction, seed=cfg.data.seed)
    train, _ = synthetic_dataset(spec)
    rng = stream(cfg.seed, "autoencoder")
    model = EncoderDecoder(int(np.prod(train.shape)), cfg.autoencoder.bottleneck, tuple(cfg.autoencoder.hidden),
                           rng=rng)
    emb = embed_dataset(model, train.flat(), train.labels).as_float32()
    t0 = time.perf_counter()
    index = build_index(emb, leaf_size=cfg.index.leaf_size)
    build_s = time.perf_counter() - t0
    arch = new_supernet(cfg, train)
    report = {"n_index": n_index, "subset_size": subset_size, "build_seconds": build_s}

    hard_s = query_s = 0.0
    if subset_size > 0:
        state = cur.init_subset(train.labels, subset_size, seed=cfg.seed, tau_mastery=cfg.curriculum.tau_mastery,
                                tau_hard=cfg.curriculum.tau_hard, warmup_epochs=0, history_window=1)
        index.query(int(train.labels[0]), index.points[0])   # compile outside the timed region
        t0 = time.perf_counter()
        fb = subset_feedback(arch, train, state.subset)
        # worst case: every sample counts as easy
        fb.prob_true[:] = 1.0
        cur.update_hardness(state, fb)
        t1 = time.perf_counter()
        state, rep = cur.refresh_subset(state, index)
        t2 = time.perf_counter()
        hard_s, query_s = t1 - t0, t2 - t1
        report["swapped"] = len(rep.swaps)
    report["hardness_seconds"] = hard_s
    report["query_seconds"] = query_s
    report["refresh_seconds"] = hard_s + query_s

    o = cfg.optim
    wopt = sgd_optimizer(lr=o.base_lr, weight_decay=o.weight_decay, momentum=o.weight_momentum)
    aopt = adam_optimizer(lr=o.arch_lr, weight_decay=o.arch_weight_decay, betas=(o.arch_beta1, o.arch_beta2))
    bs = cfg.supernet.batch_size
    perm = stream(cfg.seed, "batches").permutation(n_index)
    half = n_index // 2
    w_ids, a_ids = perm[:half], perm[half:]
    n_steps = -(-half // bs)
    run_steps = max(1, int(round(n_steps * epoch_fraction)))
    t0 = time.perf_counter()
    for s in range(run_steps):
        alternating_step(arch, _gather(train, w_ids[s * bs:(s + 1) * bs]),
                         _gather(train, a_ids[s * bs:(s + 1) * bs]), wopt, aopt)
    epoch_s = (time.perf_counter() - t0) * n_steps / run_steps
    report["epoch_seconds"] = epoch_s
    report["ratio"] = report["refresh_seconds"] / epoch_s
    return report
