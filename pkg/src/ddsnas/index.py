"""Per-class furthest-neighbour kd-trees.

Each class gets its own balanced kd-tree (median split on the dimension of
widest spread, ``leaf_size`` points per leaf).  Queries walk the tree
depth-first, most promising child first, and discard any subtree whose
bounding box cannot hold a point further away than the current k-th best.

Exclusions are applied at the leaves through a boolean mask over record
positions, so trees never change after construction.  Ties in distance are
broken by the smaller sample id.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .embeddings import Embeddings
from .errors import ConfigError

DEFAULT_LEAF_SIZE = 8


class ExhaustedError(LookupError):
    """Every point of the queried class is excluded."""


@dataclass(frozen=True)
class KdTree:
    """Flat-array kd-tree over one class.

    Node ``i`` covers ``order[start[i]:end[i]]`` (record positions).  Leaves
    have ``left[i] == right[i] == -1``.
    """

    points: np.ndarray      # (n_records_total, d) shared with the index
    order: np.ndarray       # record positions, leaf-contiguous
    lo: np.ndarray          # (n_nodes, d) bounding box minimum
    hi: np.ndarray          # (n_nodes, d) bounding box maximum
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    split_dim: np.ndarray
    split_value: np.ndarray
    depth: int

    @property
    def size(self):
        return len(self.order)

    @property
    def n_nodes(self):
        return len(self.left)

    @property
    def n_leaves(self):
        return int(np.sum(self.left < 0))


def _build_tree(points, positions, leaf_size):
    lo, hi, left, right, start, end, sdim, sval = [], [], [], [], [], [], [], []
    order = np.empty(len(positions), dtype=np.int64)
    max_depth = 0

    def new_node(pos, s, depth):
        nonlocal max_depth
        max_depth = max(max_depth, depth)
        node = len(left)
        pts = points[pos]
        lo.append(pts.min(axis=0))
        hi.append(pts.max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        end.append(s + len(pos))
        sdim.append(-1)
        sval.append(0.0)
        if len(pos) <= leaf_size:
            order[s:s + len(pos)] = pos
            return node
        spread = hi[node] - lo[node]
        dim = int(np.argmax(spread))
        mid = len(pos) // 2
        part = np.argpartition(pts[:, dim], mid, kind="introselect")
        pos = pos[part]
        sdim[node] = dim
        sval[node] = float(points[pos[mid], dim])
        left[node] = new_node(pos[:mid], s, depth + 1)
        right[node] = new_node(pos[mid:], s + mid, depth + 1)
        return node

    new_node(np.asarray(positions, dtype=np.int64), 0, 1)
    d = points.shape[1]
    return KdTree(
        points=points,
        order=order,
        lo=np.array(lo).reshape(-1, d),
        hi=np.array(hi).reshape(-1, d),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        end=np.array(end, dtype=np.int64),
        split_dim=np.array(sdim, dtype=np.int64),
        split_value=np.array(sval, dtype=np.float64),
        depth=max_depth,
    )


@numba.njit(cache=True)
def _box_bound(q, lo, hi, node):
    s = 0.0
    for j in range(q.shape[0]):
        a = q[j] - lo[node, j]
        b = q[j] - hi[node, j]
        a = a * a
        b = b * b
        s += a if a > b else b
    return s


@numba.njit(cache=True)
def _k_furthest_kernel(q, points, ids, order, lo, hi, left, right, start, end,
                       depth, k, excluded, quality_sq):
    best_d = np.full(k, -1.0)
    best_id = np.full(k, -1, dtype=np.int64)
    best_pos = np.full(k, -1, dtype=np.int64)
    filled = 0
    leaves = 0
    stack = np.empty(2 * depth + 4, dtype=np.int64)
    top = 0
    stack[0] = 0
    top = 1
    d = q.shape[0]
    while top > 0:
        top -= 1
        node = stack[top]
        if filled == k:
            if _box_bound(q, lo, hi, node) * quality_sq < best_d[k - 1]:
                continue
        if left[node] < 0:
            leaves += 1
            for t in range(start[node], end[node]):
                p = order[t]
                if excluded[p]:
                    continue
                s = 0.0
                for j in range(d):
                    diff = q[j] - points[p, j]
                    s += diff * diff
                pid = ids[p]
                if filled == k:
                    kd = best_d[k - 1]
                    if s < kd or (s == kd and pid > best_id[k - 1]):
                        continue
                    i = k - 1
                else:
                    i = filled
                    filled += 1
                # insertion: order by distance desc, then id asc
                while i > 0 and (best_d[i - 1] < s or (best_d[i - 1] == s and best_id[i - 1] > pid)):
                    best_d[i] = best_d[i - 1]
                    best_id[i] = best_id[i - 1]
                    best_pos[i] = best_pos[i - 1]
                    i -= 1
                best_d[i] = s
                best_id[i] = pid
                best_pos[i] = p
            continue
        a = left[node]
        b = right[node]
        ba = _box_bound(q, lo, hi, a)
        bb = _box_bound(q, lo, hi, b)
        # push the weaker child first so the stronger one is expanded next
        if ba >= bb:
            stack[top] = b
            stack[top + 1] = a
        else:
            stack[top] = a
            stack[top + 1] = b
        top += 2
    return best_pos[:filled], best_id[:filled], best_d[:filled], leaves


class ClassIndexSet:
    """One furthest-neighbour kd-tree per class label over an embedding table."""

    def __init__(self, embeddings, leaf_size=DEFAULT_LEAF_SIZE):
        if len(embeddings) == 0:
            raise ConfigError("cannot build an index over zero records")
        if leaf_size < 1:
            raise ConfigError("leaf_size must be >= 1")
        self.embeddings = embeddings
        self.points = np.ascontiguousarray(embeddings.vectors, dtype=np.float64)
        self.ids = np.ascontiguousarray(embeddings.ids, dtype=np.int64)
        self.labels = embeddings.labels
        self.dim = self.points.shape[1]
        self.leaf_size = leaf_size
        self._pos_of_id = {int(i): p for p, i in enumerate(self.ids)}
        if len(self._pos_of_id) != len(self.ids):
            raise ConfigError("duplicate sample ids in embedding table")
        self.trees = {}
        for c in np.unique(self.labels):
            positions = np.flatnonzero(self.labels == c)
            self.trees[int(c)] = _build_tree(self.points, positions, leaf_size)
        self.last_leaves_visited = 0

    @property
    def total(self):
        return len(self.ids)

    def class_labels(self):
        return sorted(self.trees)

    def position(self, sample_id):
        return self._pos_of_id[int(sample_id)]

    def exclusion_mask(self, exclude=()):
        mask = np.zeros(self.total, dtype=np.bool_)
        for sid in exclude:
            p = self._pos_of_id.get(int(sid))
            if p is not None:
                mask[p] = True
        return mask

    def _tree(self, class_label):
        try:
            return self.trees[int(class_label)]
        except KeyError:
            raise KeyError(f"no tree for class {class_label}") from None

    def query(self, class_label, query, k=1, mask=None, quality=1.0):
        """Low-level query with a precomputed exclusion mask.

        Returns ``(positions, sample_ids, squared_distances)`` sorted by
        distance descending.  Visited leaf count is stored on
        ``last_leaves_visited``.
        """
        tree = self._tree(class_label)
        q = np.ascontiguousarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.dim:
            raise ConfigError(f"query dimension {q.shape[0]} != index dimension {self.dim}")
        if not 0.0 < quality <= 1.0:
            raise ConfigError("quality must lie in (0, 1]")
        if k < 1:
            raise ConfigError("k must be >= 1")
        if mask is None:
            mask = np.zeros(self.total, dtype=np.bool_)
        pos, ids, d2, leaves = _k_furthest_kernel(
            q, self.points, self.ids, tree.order, tree.lo, tree.hi, tree.left, tree.right,
            tree.start, tree.end, tree.depth, int(min(k, tree.size)), mask, quality * quality)
        self.last_leaves_visited = int(leaves)
        return pos, ids, d2


def build_index(records, leaf_size=DEFAULT_LEAF_SIZE):
    """Build a :class:`ClassIndexSet` from ``Embeddings`` or a list of records."""
    if not isinstance(records, Embeddings):
        records = Embeddings.from_records(records)
    return ClassIndexSet(records, leaf_size=leaf_size)


def k_furthest(index, class_label, query, k, exclude=()):
    """Top-``k`` furthest non-excluded points of a class as ``[(sample_id, distance), ...]``."""
    _, ids, d2 = index.query(class_label, query, k=k, mask=index.exclusion_mask(exclude))
    return [(int(i), float(np.sqrt(d))) for i, d in zip(ids, d2)]


def furthest(index, class_label, query, exclude=()):
    """Exact furthest neighbour ``(sample_id, distance)`` within one class."""
    _, ids, d2 = index.query(class_label, query, k=1, mask=index.exclusion_mask(exclude))
    if len(ids) == 0:
        raise ExhaustedError(f"all points of class {class_label} are excluded")
    return int(ids[0]), float(np.sqrt(d2[0]))


def approx_furthest(index, class_label, query, quality=1.0, exclude=()):
    """Furthest neighbour pruning subtrees whose bound is below ``best / quality``.

    The returned distance is at least ``quality`` times the true maximum.
    """
    _, ids, d2 = index.query(class_label, query, k=1, mask=index.exclusion_mask(exclude), quality=quality)
    if len(ids) == 0:
        raise ExhaustedError(f"all points of class {class_label} are excluded")
    return int(ids[0]), float(np.sqrt(d2[0]))


# --------------------------------------------------------------------------
# Linear-scan reference
# --------------------------------------------------------------------------

def brute_force_k_furthest(records, class_label, query, k, exclude=()):
    if not isinstance(records, Embeddings):
        records = Embeddings.from_records(records)
    q = np.asarray(query, dtype=np.float64).ravel()
    excl = set(int(e) for e in exclude)
    cand = [
        (float(np.dot(v - q, v - q)), int(i))
        for i, c, v in zip(records.ids, records.labels, records.vectors)
        if c == class_label and int(i) not in excl
    ]
    cand.sort(key=lambda t: (-t[0], t[1]))
    return [(i, float(np.sqrt(d))) for d, i in cand[:k]]


def brute_force_furthest(records, class_label, query, exclude=()):
    """Linear scan; the reference semantics for :func:`furthest`."""
    if not isinstance(records, Embeddings):
        records = Embeddings.from_records(records)
    if class_label not in set(records.labels.tolist()):
        raise KeyError(f"no records for class {class_label}")
    res = brute_force_k_furthest(records, class_label, query, 1, exclude)
    if not res:
        raise ExhaustedError(f"all points of class {class_label} are excluded")
    return res[0]
