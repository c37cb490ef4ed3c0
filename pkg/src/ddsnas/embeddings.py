"""Embedding records and their on-disk formats.

Binary layout (little-endian)::

    header  magic b"DDSE" | version u32 | class_count u32 | dim u32 | record_count u64
    record  sample_id u64 | class_label u32 | dim x float32

A CSV dump (``id,label,v0..v{N-1}``) is provided for external plotting.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .fsutil import atomic_write_bytes, atomic_write_text

MAGIC = b"DDSE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


@dataclass(frozen=True)
class EmbeddingRecord:
    sample_id: int
    class_label: int
    vector: np.ndarray


@dataclass
class Embeddings:
    """Column-oriented table of embedding records."""

    ids: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        n = len(self.ids)
        if len(self.labels) != n or self.vectors.shape[0] != n:
            raise ConfigError("ids, labels and vectors must have the same length")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigError("embedding vectors must be finite")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            raise ConfigError("no embedding records")
        dims = {len(np.ravel(r.vector)) for r in records}
        if len(dims) != 1:
            raise ConfigError(f"inconsistent embedding dimensions {sorted(dims)}")
        return cls(
            np.array([r.sample_id for r in records]),
            np.array([r.class_label for r in records]),
            np.array([np.ravel(r.vector) for r in records], dtype=np.float64),
        )

    def records(self):
        return [EmbeddingRecord(int(i), int(c), v.copy()) for i, c, v in zip(self.ids, self.labels, self.vectors)]

    def as_float32(self):
        """Copy with vectors rounded through float32, i.e. exactly what the binary file stores."""
        return Embeddings(self.ids.copy(), self.labels.copy(), self.vectors.astype(np.float32).astype(np.float64))


def _record_dtype(dim):
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("vec", "<f4", (dim,))])


def encode_ddse(emb):
    n_classes = len(np.unique(emb.labels)) if len(emb) else 0
    rec = np.zeros(len(emb), dtype=_record_dtype(emb.dim))
    rec["id"] = emb.ids
    rec["label"] = emb.labels
    rec["vec"] = emb.vectors
    return _HEADER.pack(MAGIC, VERSION, n_classes, emb.dim, len(emb)) + rec.tobytes()


def decode_ddse(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("embedding file truncated: incomplete header")
    magic, version, _n_classes, dim, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad embedding magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported embedding format version {version}")
    dt = _record_dtype(dim)
    need = _HEADER.size + count * dt.itemsize
    if len(buf) < need:
        raise FormatError(f"embedding file truncated: expected {need} bytes, got {len(buf)}")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    return Embeddings(rec["id"].astype(np.int64), rec["label"].astype(np.int64), rec["vec"].astype(np.float64))


def write_ddse(path, emb):
    atomic_write_bytes(path, encode_ddse(emb))


def read_ddse(path):
    with open(path, "rb") as f:
        return decode_ddse(f.read())


def write_embeddings_csv(path, emb):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "label"] + [f"v{j}" for j in range(emb.dim)])
    for i, c, v in zip(emb.ids, emb.labels, emb.vectors):
        w.writerow([int(i), int(c)] + [repr(float(x)) for x in v])
    atomic_write_text(path, out.getvalue())
