"""Mastery-gated curriculum over a class-balanced data subset.

Per-sample hardness is ``1 - p(true class)``, averaged over a short window of
recent epochs.  When the subset is mastered (enough samples classified
correctly) and warmup has passed, hard samples are kept and easy ones are
swapped for the furthest same-class neighbour of their own embedding.
"""
from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fsutil import atomic_write_text

RETAIN_HIGH = "retain-high"      # hard iff mean hardness >= 1 - tau_hard
RETAIN_STRICT = "retain-strict"  # hard iff mean hardness >= tau_hard


@dataclass
class CurriculumState:
    subset: list
    labels: np.ndarray                     # class label of every global sample id
    tau_mastery: float = 0.5
    tau_hard: float = 0.85
    warmup_epochs: int = 10
    history_window: int = 3
    hardness_rule: str = RETAIN_HIGH
    epoch_counter: int = 0
    refresh_counter: int = 0
    history: dict = field(default_factory=dict)
    visited: set = field(default_factory=set)

    def __post_init__(self):
        for name in ("tau_mastery", "tau_hard"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.history_window < 1:
            raise ConfigError("history_window must be >= 1")
        if self.hardness_rule not in (RETAIN_HIGH, RETAIN_STRICT):
            raise ConfigError(f"unknown hardness rule {self.hardness_rule!r}")
        for sid in self.subset:
            self.history.setdefault(sid, deque(maxlen=self.history_window))
        self.visited.update(self.subset)

    @property
    def size(self):
        return len(self.subset)

    def mean_hardness(self, sid):
        buf = self.history.get(sid)
        if not buf:
            return float("nan")
        return float(sum(buf) / len(buf))

    def is_hard(self, sid):
        h = self.mean_hardness(sid)
        if h != h:  # no history yet: keep it
            return True
        cut = 1.0 - self.tau_hard if self.hardness_rule == RETAIN_HIGH else self.tau_hard
        return h >= cut

    def class_counts(self):
        vals, counts = np.unique(self.labels[np.asarray(self.subset, dtype=np.int64)], return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))


@dataclass
class EpochFeedback:
    ids: np.ndarray
    prob_true: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.prob_true = np.asarray(self.prob_true, dtype=np.float64)
        self.correct = np.asarray(self.correct, dtype=bool)
        if not (len(self.ids) == len(self.prob_true) == len(self.correct)):
            raise ConfigError("feedback arrays differ in length")
        if np.any((self.prob_true < 0) | (self.prob_true > 1)):
            raise ConfigError("prob_true must lie in [0, 1]")


@dataclass
class Replacement:
    replaced_id: int
    replacement_id: int       # -1 when no candidate was left and the sample was kept
    class_label: int
    distance: float


@dataclass
class ReplacementReport:
    refresh_id: int
    retained_count: int
    replacements: list = field(default_factory=list)

    @property
    def fallbacks(self):
        return [r for r in self.replacements if r.replacement_id < 0]

    @property
    def swaps(self):
        return [r for r in self.replacements if r.replacement_id >= 0]


REPORT_COLUMNS = ["refresh_id", "replaced_id", "replacement_id", "class", "distance", "retained_count"]


def report_rows(reports):
    for rep in reports:
        for r in rep.replacements:
            yield [rep.refresh_id, r.replaced_id, r.replacement_id, r.class_label, repr(r.distance), rep.retained_count]


def write_reports_csv(path, reports):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(report_rows(reports))
    atomic_write_text(path, out.getvalue())


def init_subset(labels, S, seed=0, **state_kw):
    """Uniform random class-balanced subset of ``S`` sample ids (ids are positions in ``labels``)."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    m = len(classes)
    if m == 0:
        raise ConfigError("no classes in dataset")
    if S <= 0 or S % m:
        raise ConfigError(f"subset size {S} must be a positive multiple of the class count {m}")
    per = S // m
    rng = np.random.default_rng(seed)
    subset = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if len(members) < per:
            raise ConfigError(f"class {c} has {len(members)} samples, needs {per}")
        subset.extend(int(i) for i in rng.choice(members, size=per, replace=False))
    return CurriculumState(subset=subset, labels=labels, **state_kw)


def _check_covers(state, feedback):
    fb = set(feedback.ids.tolist())
    cur = set(state.subset)
    stray = fb - cur
    if stray:
        raise ConfigError(f"feedback for ids outside the subset: {sorted(stray)[:5]}")
    if fb != cur or len(feedback.ids) != len(cur):
        raise ConfigError("feedback must cover every subset sample exactly once")


def update_hardness(state, feedback):
    """Append ``1 - prob_true`` to each sample's hardness window."""
    _check_covers(state, feedback)
    for sid, p in zip(feedback.ids.tolist(), feedback.prob_true.tolist()):
        state.history[sid].append(1.0 - p)
    return state


def is_mastered(state, feedback):
    _check_covers(state, feedback)
    return int(np.count_nonzero(feedback.correct)) >= state.tau_mastery * state.size


def warmup_gate(state):
    """True once more than ``warmup_epochs`` epochs have been completed."""
    return state.epoch_counter > state.warmup_epochs


def easy_order(state):
    """Easy subset members, easiest first (ties by id)."""
    easy = [sid for sid in state.subset if not state.is_hard(sid)]
    return sorted(easy, key=lambda s: (state.mean_hardness(s), s))


def refresh_subset(state, index):
    """Keep hard samples, replace easy ones by same-class furthest neighbours.

    Each easy sample (easiest first) is replaced by the furthest point of its
    class from its own embedding, excluding everything currently in the
    subset and every replacement already chosen.  Returns
    ``(state, ReplacementReport)``; ``state`` is updated in place.
    """
    easy = easy_order(state)
    report = ReplacementReport(refresh_id=state.refresh_counter + 1,
                               retained_count=state.size - len(easy))
    mask = index.exclusion_mask(state.subset)
    slot = {sid: i for i, sid in enumerate(state.subset)}
    for sid in easy:
        c = int(state.labels[sid])
        pos = index.position(sid)
        _, ids, d2 = index.query(c, index.points[pos], k=1, mask=mask)
        if len(ids) == 0:
            report.replacements.append(Replacement(sid, -1, c, 0.0))
            continue
        new = int(ids[0])
        mask[index.position(new)] = True
        state.subset[slot.pop(sid)] = new
        del state.history[sid]
        state.history[new] = deque(maxlen=state.history_window)
        state.visited.add(new)
        report.replacements.append(Replacement(sid, new, c, float(np.sqrt(d2[0]))))
    state.refresh_counter += 1
    return state, report


def advance_epoch(state, feedback, index=None):
    """Record one epoch of feedback and refresh when the gates allow it.

    Returns the :class:`ReplacementReport` of the refresh, or ``None`` when
    the subset was kept (``index`` None, still in warmup, or not mastered).
    """
    update_hardness(state, feedback)
    state.epoch_counter += 1
    if index is None or not warmup_gate(state) or not is_mastered(state, feedback):
        return None
    _, report = refresh_subset(state, index)
    return report
