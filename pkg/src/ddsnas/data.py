"""Image datasets: a synthetic class-pattern generator and a small binary format.

Binary layout (little-endian)::

    magic b"DDSD" | version u32 | count u64 | height u32 | width u32 | channels u32
    count*height*width*channels uint8 pixels (N, H, W, C order)
    count uint8 labels
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .fsutil import atomic_write_bytes

MAGIC = b"DDSD"
VERSION = 1
_HEADER = struct.Struct("<4sIQIII")


@dataclass
class Dataset:
    """Images as float64 in [0, 1] with shape ``(n, C, H, W)`` plus integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def flat(self):
        return self.images.reshape(len(self), -1)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx])

    def standardized(self, mean=None, std=None):
        """Copy scaled to zero mean and unit variance (statistics default to this dataset's)."""
        mean = float(self.images.mean()) if mean is None else mean
        std = float(self.images.std()) if std is None else std
        return Dataset((self.images - mean) / (std if std > 0 else 1.0), self.labels)


# --------------------------------------------------------------------------
# synthetic patterns
# --------------------------------------------------------------------------

def _pattern(kind, size, thick):
    """Binary glyph centred on a ``size`` x ``size`` canvas."""
    img = np.zeros((size, size))
    c = size // 2
    r = size // 3
    lo, hi = c - r, c + r
    t0, t1 = c - thick // 2, c - thick // 2 + thick
    yy, xx = np.mgrid[:size, :size]
    if kind == 0:      # horizontal bar
        img[t0:t1, lo:hi + 1] = 1
    elif kind == 1:    # vertical bar
        img[lo:hi + 1, t0:t1] = 1
    elif kind == 2:    # main diagonal
        img[(np.abs(yy - xx) < thick) & (yy >= lo) & (yy <= hi)] = 1
    elif kind == 3:    # anti-diagonal
        img[(np.abs(yy + xx - 2 * c) < thick) & (yy >= lo) & (yy <= hi)] = 1
    elif kind == 4:    # plus
        img[t0:t1, lo:hi + 1] = 1
        img[lo:hi + 1, t0:t1] = 1
    elif kind == 5:    # x
        band = (np.abs(yy - xx) < thick) | (np.abs(yy + xx - 2 * c) < thick)
        img[band & (yy >= lo) & (yy <= hi) & (xx >= lo) & (xx <= hi)] = 1
    elif kind == 6:    # square outline
        img[lo:hi + 1, lo:hi + 1] = 1
        img[lo + thick:hi + 1 - thick, lo + thick:hi + 1 - thick] = 0
    elif kind == 7:    # filled block
        img[c - r // 2 - 1:c + r // 2 + 1, c - r // 2 - 1:c + r // 2 + 1] = 1
    elif kind == 8:    # ring
        d = np.sqrt((yy - c + 0.5) ** 2 + (xx - c + 0.5) ** 2)
        img[np.abs(d - r) < 0.5 + thick / 2] = 1
    elif kind == 9:    # L corner
        img[lo:hi + 1, lo:lo + thick] = 1
        img[hi + 1 - thick:hi + 1, lo:hi + 1] = 1
    else:
        raise ConfigError(f"no pattern for class {kind}")
    return img


N_PATTERNS = 10


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    side: int = 12
    n_train: int = 5000
    n_test: int = 1000
    noise: float = 0.25
    max_shift: int = 2
    dark_fraction: float = 0.25
    seed: int = 0


def _render(labels, spec, rng):
    n = len(labels)
    out = np.empty((n, 1, spec.side, spec.side))
    glyphs = {(k, t): _pattern(k % N_PATTERNS, spec.side, t) for k in range(spec.n_classes) for t in (1, 2)}
    for i, k in enumerate(labels):
        g = glyphs[(int(k), int(rng.integers(1, 3)))]
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        g = np.roll(np.roll(g, dy, axis=0), dx, axis=1)
        if k >= N_PATTERNS:
            # classes past the glyph set reuse a glyph rotated by a quarter turn
            g = np.rot90(g, k // N_PATTERNS)
        contrast = rng.uniform(0.4, 0.9)
        background = rng.uniform(0.0, 0.3)
        img = background + contrast * g
        if rng.random() < spec.dark_fraction:
            img = 1.0 - img
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        out[i, 0] = np.clip(img, 0.0, 1.0)
    return out


def synthetic_dataset(spec=None):
    """Generate ``(train, test)`` datasets of class-specific glyphs.

    Each image is a shifted, contrast-scaled glyph on a random background,
    inverted (dark glyph on light ground) for a ``dark_fraction`` of samples,
    plus Gaussian pixel noise.  Classes are balanced.
    """
    spec = spec or SyntheticSpec()
    if spec.n_classes < 1 or spec.n_classes > 4 * N_PATTERNS:
        raise ConfigError(f"n_classes must be in [1, {4 * N_PATTERNS}]")
    if spec.side < 8:
        raise ConfigError("side must be >= 8")
    rng = np.random.default_rng(spec.seed)
    res = []
    for n in (spec.n_train, spec.n_test):
        labels = np.arange(n) % spec.n_classes
        labels = labels[rng.permutation(n)]
        res.append(Dataset(_render(labels, spec, rng), labels))
    return res[0], res[1]


# --------------------------------------------------------------------------
# binary format
# --------------------------------------------------------------------------

def encode_ddsd(ds):
    n, C, H, W = ds.images.shape
    if ds.n_classes > 256:
        raise ConfigError("binary dataset format stores labels as bytes (<= 256 classes)")
    pix = np.round(np.clip(ds.images, 0, 1) * 255).astype(np.uint8).transpose(0, 2, 3, 1)
    return _HEADER.pack(MAGIC, VERSION, n, H, W, C) + pix.tobytes() + ds.labels.astype(np.uint8).tobytes()


def decode_ddsd(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("dataset file truncated: incomplete header")
    magic, version, n, H, W, C = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dataset format version {version}")
    if H == 0 or W == 0 or C == 0:
        raise FormatError("dataset header has a zero dimension")
    npix = n * H * W * C
    need = _HEADER.size + npix + n
    if len(buf) < need:
        raise FormatError(f"dataset file truncated: expected {need} bytes, got {len(buf)}")
    pix = np.frombuffer(buf, dtype=np.uint8, count=npix, offset=_HEADER.size)
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=_HEADER.size + npix)
    images = pix.reshape(n, H, W, C).transpose(0, 3, 1, 2).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64))


def save_dataset(path, ds):
    atomic_write_bytes(path, encode_ddsd(ds))


def load_dataset(source):
    """Load a dataset.

    ``source`` is either a path to a binary file, a :class:`SyntheticSpec`,
    or a mapping of ``SyntheticSpec`` fields.  Synthetic sources return
    ``(train, test)``; a file returns a single :class:`Dataset`.
    """
    if isinstance(source, SyntheticSpec):
        return synthetic_dataset(source)
    if isinstance(source, dict):
        return synthetic_dataset(SyntheticSpec(**source))
    with open(source, "rb") as f:
        return decode_ddsd(f.read())
