"""Independent reference implementations shared by the unit and acceptance tests."""
import copy

import numpy as np

from ddsnas import curriculum as cur
from ddsnas.embeddings import Embeddings
from ddsnas.index import build_index


def scan_furthest(points, ids, labels, c, q, excluded):
    """Linear scan: furthest point of class ``c`` not in ``excluded``; ties to the smaller id.

    Squared distances accumulate dimension by dimension, the same order of
    floating-point operations as a scalar loop.
    """
    cand = np.flatnonzero((labels == c) & ~np.isin(ids, list(excluded)))
    if len(cand) == 0:
        return None, 0.0
    d2 = np.zeros(len(cand))
    for j in range(points.shape[1]):
        diff = q[j] - points[cand, j]
        d2 += diff * diff
    best = cand[np.lexsort((ids[cand], -d2))[0]]
    return int(ids[best]), float(np.sqrt(d2[np.flatnonzero(cand == best)[0]]))


def replay_refresh(subset, history, labels, emb, tau_hard, rule=cur.RETAIN_HIGH):
    """Re-derive a refresh from a snapshot: returns ``(new_subset, [(old, new, class, distance)])``."""
    cut = 1.0 - tau_hard if rule == cur.RETAIN_HIGH else tau_hard
    mean_h = {s: (sum(history[s]) / len(history[s]) if history[s] else None) for s in subset}
    easy = [s for s in subset if mean_h[s] is not None and mean_h[s] < cut]
    easy.sort(key=lambda s: (mean_h[s], s))
    row = {int(i): r for r, i in enumerate(emb.ids)}
    excluded = set(subset)
    new = list(subset)
    out = []
    for s in easy:
        c = int(labels[s])
        rid, dist = scan_furthest(emb.vectors, emb.ids, emb.labels, c, emb.vectors[row[s]], excluded)
        if rid is None:
            out.append((s, -1, c, 0.0))
            continue
        excluded.add(rid)
        new[new.index(s)] = rid
        out.append((s, rid, c, dist))
    return new, out


def random_embeddings(n_classes, per_class, dim, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), per_class)
    rng.shuffle(labels)
    return Embeddings(np.arange(len(labels)), labels, rng.normal(size=(len(labels), dim))).as_float32()


def fuzz_run(epochs=200, n_classes=10, per_class=1000, S=100, dim=8, seed=0, snapshots=50, tau_hard=0.85,
             tau_mastery=0.5, warmup=10):
    """Drive the curriculum with random feedback; collect invariant violations and oracle mismatches.

    Returns a dict with the refresh epochs, mastery flags at refresh time,
    per-refresh class counts, duplicate flags and oracle comparison results.
    """
    rng = np.random.default_rng(seed)
    emb = random_embeddings(n_classes, per_class, dim, seed)
    index = build_index(emb)
    state = cur.init_subset(emb.labels, S, seed=seed, tau_mastery=tau_mastery, tau_hard=tau_hard,
                            warmup_epochs=warmup)
    per = S // n_classes
    res = {"refresh_epochs": [], "mastered_at_refresh": [], "balanced": [], "duplicates": 0, "checked": 0,
           "mismatches": 0, "refreshes": 0}
    for epoch in range(1, epochs + 1):
        ids = np.array(state.subset)
        # confidence skewed high so that many samples turn easy, accuracy around the mastery threshold
        prob = rng.beta(rng.uniform(0.5, 5.0), 1.0, size=S)
        correct = rng.random(S) < rng.uniform(0.3, 0.8)
        fb = cur.EpochFeedback(ids, prob, correct)
        mastered = bool(np.count_nonzero(correct) >= tau_mastery * S)
        snap = None
        if res["checked"] < snapshots:
            snap = (list(state.subset), copy.deepcopy(state.history))
        rep = cur.advance_epoch(state, fb, index)
        if len(set(state.subset)) != S:
            res["duplicates"] += 1
        if rep is None:
            continue
        res["refreshes"] += 1
        res["refresh_epochs"].append(epoch)
        res["mastered_at_refresh"].append(mastered)
        counts = np.bincount(emb.labels[np.array(state.subset)], minlength=n_classes)
        res["balanced"].append(bool(np.all(counts == per)))
        if snap is not None:
            subset0, hist0 = snap
            # the snapshot precedes this epoch's hardness update; apply it the same way
            for sid, p in zip(ids.tolist(), prob.tolist()):
                hist0[sid].append(1.0 - p)
            want_subset, want = replay_refresh(subset0, hist0, emb.labels, emb, tau_hard)
            got = [(r.replaced_id, r.replacement_id, r.class_label, r.distance) for r in rep.replacements]
            res["checked"] += 1
            if want_subset != state.subset or want != got:
                res["mismatches"] += 1
    return res
