"""Bottleneck encoder-decoder used to embed images for similarity lookup.

The encoder and decoder are dense stacks without skip connections between
them.  Two training objectives are supported:

``contractive``
    squared reconstruction error plus ``lambda * ||J||_F^2`` where ``J`` is
    the encoder Jacobian.  The penalty's parameter gradient is computed
    exactly by back-propagating through the Jacobian recursion.
``triplet_mse``
    triplet margin loss on the codes and mean squared reconstruction error,
    combined with learned log-variance weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .embeddings import Embeddings, EmbeddingRecord
from .errors import ConfigError, NumericError
from .neuralnet import adam_optimizer, adam_step

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# activations with first and second derivatives
# --------------------------------------------------------------------------

def _act(name, z):
    """Return ``(a, a', a'')`` for activation ``name`` at pre-activation ``z``."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "linear":
        return z, np.ones_like(z), np.zeros_like(z)
    if name == "sigmoid":
        a = 1.0 / (1.0 + np.exp(-z))
        d1 = a * (1.0 - a)
        return a, d1, d1 * (1.0 - 2.0 * a)
    if name == "relu":
        m = (z > 0).astype(np.float64)
        return z * m, m, np.zeros_like(z)
    raise ConfigError(f"unknown activation {name!r}")


class _MLP:
    """Dense stack ``a_l = act_l(a_{l-1} @ W_l + b_l)`` with Jacobian support."""

    def __init__(self, sizes, acts, rng, zero_last=False):
        if len(acts) != len(sizes) - 1:
            raise ConfigError("need one activation per layer")
        self.sizes = list(sizes)
        self.acts = list(acts)
        self.W, self.b = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero_last and i == len(sizes) - 2:
                W = np.zeros((n_in, n_out))
            else:
                # xavier-style scaling keeps tanh units out of saturation
                W = rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_in, n_out))
            self.W.append(W)
            self.b.append(np.zeros(n_out))

    def params(self, prefix):
        out = {}
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            out[f"{prefix}.{i}.W"] = W
            out[f"{prefix}.{i}.b"] = b
        return out

    def forward(self, x, jacobian=False):
        """Return ``(output, cache)``; with ``jacobian`` also builds d(output)/d(x)."""
        a = x
        cache = {"a": [x], "d1": [], "d2": [], "M": [], "T": []}
        M = None
        for l, (W, b) in enumerate(zip(self.W, self.b)):
            z = a @ W + b
            a, d1, d2 = _act(self.acts[l], z)
            cache["a"].append(a)
            cache["d1"].append(d1)
            cache["d2"].append(d2)
            if jacobian:
                if M is None:
                    T = np.broadcast_to(W.T, (x.shape[0],) + W.T.shape)
                else:
                    T = np.einsum("io,bid->bod", W, M, optimize=True)
                cache["T"].append(T)
                M = d1[:, :, None] * T
                cache["M"].append(M)
        cache["J"] = M
        return a, cache

    def backward(self, cache, d_out, dJ=None):
        """Gradients w.r.t. weights for upstream ``d_out`` (and ``dJ`` on the Jacobian).

        Returns ``(grads_W, grads_b, d_input)``; ``d_input`` ignores the
        Jacobian path (inputs are data, not parameters).
        """
        L = len(self.W)
        gW = [np.zeros_like(W) for W in self.W]
        gb = [np.zeros_like(b) for b in self.b]
        extra_dz = [None] * L
        if dJ is not None:
            G = dJ
            for l in range(L - 1, -1, -1):
                T = cache["T"][l]
                d1 = cache["d1"][l]
                g_d = np.einsum("bod,bod->bo", G, T, optimize=True)
                gT = d1[:, :, None] * G
                if l == 0:
                    gW[0] += gT.sum(axis=0).T
                else:
                    Mprev = cache["M"][l - 1]
                    gW[l] += np.einsum("bod,bid->io", gT, Mprev, optimize=True)
                    G = np.einsum("io,bod->bid", self.W[l], gT, optimize=True)
                extra_dz[l] = g_d * cache["d2"][l]
        da = d_out
        for l in range(L - 1, -1, -1):
            dz = da * cache["d1"][l] if da is not None else 0.0
            if extra_dz[l] is not None:
                dz = dz + extra_dz[l]
            if np.isscalar(dz):
                dz = np.zeros_like(cache["d1"][l])
            gW[l] += cache["a"][l].T @ dz
            gb[l] += dz.sum(axis=0)
            da = dz @ self.W[l].T
        return gW, gb, da


@dataclass
class AutoencoderConfig:
    bottleneck: int = 32
    hidden: tuple = (64, 32)
    loss: str = "contractive"          # or "triplet_mse"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    contractive_lambda: float = 1e-4
    triplet_margin: float = 1.0
    kendall_init: tuple = (0.0, 0.0)


class EncoderDecoder:
    """Dense bottleneck autoencoder (no encoder-decoder skip connections)."""

    def __init__(self, input_dim, bottleneck=32, hidden=(64, 32), rng=None, zero_init_bottleneck=False,
                 kendall_init=(0.0, 0.0)):
        if bottleneck <= 0 or input_dim <= 0:
            raise ConfigError("dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.bottleneck = int(bottleneck)
        hidden = tuple(int(h) for h in hidden)
        self.encoder = _MLP((input_dim,) + hidden + (bottleneck,), ["tanh"] * len(hidden) + ["linear"], rng,
                            zero_last=zero_init_bottleneck)
        self.decoder = _MLP((bottleneck,) + hidden[::-1] + (input_dim,), ["tanh"] * len(hidden) + ["linear"], rng)
        self.kendall = KendallWeights(*kendall_init)

    def params(self):
        p = self.encoder.params("enc")
        p.update(self.decoder.params("dec"))
        return p

    def n_params(self):
        return sum(v.size for v in self.params().values())

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.input_dim:
            raise ConfigError(f"input has {x2.shape[1]} features, model expects {self.input_dim}")
        code, _ = self.encoder.forward(x2)
        return code[0] if single else code

    def reconstruct(self, x):
        x2 = np.asarray(x, dtype=np.float64).reshape(-1, self.input_dim)
        code, _ = self.encoder.forward(x2)
        out, _ = self.decoder.forward(code)
        return out

    def jacobian(self, x):
        """Encoder Jacobian ``d code / d x`` with shape ``(B, N, D)``."""
        x2 = np.asarray(x, dtype=np.float64).reshape(-1, self.input_dim)
        _, cache = self.encoder.forward(x2, jacobian=True)
        return cache["J"]

    def save(self, path):
        arrays = {k: v for k, v in self.params().items()}
        arrays["kendall"] = np.array([self.kendall.s1, self.kendall.s2])
        arrays["meta"] = np.array([self.input_dim, self.bottleneck] + [W.shape[1] for W in self.encoder.W[:-1]])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        z = np.load(path)
        meta = [int(v) for v in z["meta"]]
        model = cls(meta[0], meta[1], tuple(meta[2:]))
        for k, v in model.params().items():
            v[...] = z[k]
        model.kendall = KendallWeights(*map(float, z["kendall"]))
        return model


def encode(model, image):
    """N-dimensional code of one image (any shape flattening to the model input)."""
    return model.encode(np.asarray(image, dtype=np.float64).ravel())


def embed_dataset(model, images, labels, ids=None, batch=512):
    X = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    codes = np.concatenate([model.encode(X[i:i + batch]) for i in range(0, len(X), batch)]) if len(X) else \
        np.zeros((0, model.bottleneck))
    ids = np.arange(len(X)) if ids is None else ids
    return Embeddings(ids, labels, codes)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def contractive_loss(x, reconstruction, encoder_jacobian, lam):
    """``||x - x_hat||^2 + lam * ||J||_F^2`` for one sample."""
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(reconstruction, dtype=np.float64)
    J = np.asarray(encoder_jacobian, dtype=np.float64)
    if J.ndim != 2 or J.shape[1] != x.size:
        raise ConfigError(f"jacobian must be N x {x.size}, got {J.shape}")
    val = float(np.sum((x - xh) ** 2) + lam * np.sum(J * J))
    if not math.isfinite(val):
        raise NumericError("non-finite contractive loss")
    return val


def contractive_loss_grad(x, reconstruction, encoder_jacobian, lam):
    """Gradients of :func:`contractive_loss` w.r.t. the reconstruction and the Jacobian."""
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(reconstruction, dtype=np.float64)
    J = np.asarray(encoder_jacobian, dtype=np.float64)
    return 2.0 * (xh - x), 2.0 * lam * J


def triplet_margin_loss(anchor, positive, negative, margin=1.0):
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if not (a.shape == p.shape == n.shape):
        raise ConfigError("triplet vectors must share a dimension")
    if margin <= 0:
        raise ConfigError("margin must be positive")
    return float(max(0.0, np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin))


def triplet_margin_loss_grad(anchor, positive, negative, margin=1.0):
    """Batched triplet loss: returns ``(mean_loss, d_anchor, d_positive, d_negative)``.

    Inputs are ``(T, N)`` arrays; distances of exactly zero contribute a zero
    subgradient.
    """
    a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (anchor, positive, negative))
    T = a.shape[0]
    dap = a - p
    dan = a - n
    nap = np.linalg.norm(dap, axis=1)
    nan_ = np.linalg.norm(dan, axis=1)
    raw = nap - nan_ + margin
    active = raw > 0
    loss = float(np.sum(np.where(active, raw, 0.0)) / T)
    uap = np.divide(dap, nap[:, None], out=np.zeros_like(dap), where=nap[:, None] > 0)
    uan = np.divide(dan, nan_[:, None], out=np.zeros_like(dan), where=nan_[:, None] > 0)
    w = active[:, None] / T
    ga = w * (uap - uan)
    gp = -w * uap
    gn = w * uan
    return loss, ga, gp, gn


@dataclass
class KendallWeights:
    """Log-variance task weights ``s = log sigma^2`` for two losses."""

    s1: float = 0.0
    s2: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.s1) and math.isfinite(self.s2)):
            raise ConfigError("kendall weights must be finite")


def kendall_combined_loss(l_triplet, l_mse, w):
    """``exp(-s1) l_triplet + s1/2 + exp(-s2) l_mse + s2/2``."""
    return float(math.exp(-w.s1) * l_triplet + 0.5 * w.s1 + math.exp(-w.s2) * l_mse + 0.5 * w.s2)


def kendall_combined_grad(l_triplet, l_mse, w):
    """Partial derivatives ``(d/dl_triplet, d/dl_mse, d/ds1, d/ds2)``."""
    e1, e2 = math.exp(-w.s1), math.exp(-w.s2)
    return e1, e2, 0.5 - e1 * l_triplet, 0.5 - e2 * l_mse


# --------------------------------------------------------------------------
# mining and scoring
# --------------------------------------------------------------------------

def triplet_miner(labels, batch, rng):
    """Draw one ``(anchor, positive, negative)`` per anchor in ``batch``.

    Positives share the anchor's class, negatives do not; both come from the
    whole labelled set.  Single-class batches yield no triplets.
    """
    labels = np.asarray(labels)
    batch = np.asarray(batch)
    if len(np.unique(labels[batch])) < 2:
        return []
    by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    others_of = {}
    triples = []
    for a in batch:
        c = int(labels[a])
        same = by_class[c]
        if len(same) < 2:
            continue
        p = a
        while p == a:
            p = int(same[rng.integers(len(same))])
        others = others_of.get(c)
        if others is None:
            others = others_of[c] = np.flatnonzero(labels != c)
        triples.append((int(a), p, int(others[rng.integers(len(others))])))
    return triples


def _mean_pair_distance(A, B=None, chunk=2048):
    """Mean Euclidean distance over unordered pairs within ``A`` or all pairs ``A x B``."""
    total, count = 0.0, 0
    if B is None:
        n = len(A)
        for i in range(0, n, chunk):
            D = cdist(A[i:i + chunk], A[i:])
            # keep j > i only
            r = np.arange(D.shape[0])[:, None]
            c = np.arange(D.shape[1])[None, :]
            total += D[c > r].sum()
        count = n * (n - 1) // 2
    else:
        for i in range(0, len(A), chunk):
            total += cdist(A[i:i + chunk], B).sum()
        count = len(A) * len(B)
    return total, count


def clustering_score(records, degenerate="sentinel"):
    """Mean inter-class over mean intra-class pairwise distance (> 1 means clustered).

    Perfectly collapsed classes with distinct positions give ``inf``.  When
    every embedding is identical the ratio is undefined: ``degenerate``
    chooses between returning 1.0 (``"sentinel"``) and raising (``"error"``).
    """
    emb = records if isinstance(records, Embeddings) else Embeddings.from_records(records)
    classes = np.unique(emb.labels)
    if len(classes) < 2:
        raise ConfigError("clustering_score needs at least two classes")
    groups = [emb.vectors[emb.labels == c] for c in classes]
    if min(len(g) for g in groups) < 2:
        raise ConfigError("clustering_score needs at least two samples per class")
    intra_t = intra_c = inter_t = inter_c = 0
    for i, g in enumerate(groups):
        t, c = _mean_pair_distance(g)
        intra_t += t
        intra_c += c
        for h in groups[i + 1:]:
            t, c = _mean_pair_distance(g, h)
            inter_t += t
            inter_c += c
    intra = intra_t / intra_c
    inter = inter_t / inter_c
    if intra == 0.0:
        if inter == 0.0:
            if degenerate == "error":
                raise ConfigError("clustering_score undefined: all embeddings identical")
            return 1.0
        return math.inf
    return inter / intra


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    step_recon: list = field(default_factory=list)


def _contractive_batch(model, X, lam):
    enc, dec = model.encoder, model.decoder
    B = X.shape[0]
    code, ecache = enc.forward(X, jacobian=lam > 0)
    out, dcache = dec.forward(code)
    diff = out - X
    recon = float(np.sum(diff * diff) / B)
    J = ecache["J"]
    pen = float(np.sum(J * J) / B) if lam > 0 else 0.0
    loss = recon + lam * pen
    gWd, gbd, dcode = dec.backward(dcache, 2.0 * diff / B)
    gWe, gbe, _ = enc.backward(ecache, dcode, dJ=(2.0 * lam / B) * J if lam > 0 else None)
    return loss, recon, gWe, gbe, gWd, gbd, 0.0, 0.0


def _triplet_mse_batch(model, X_all, batch_local, triples_local, cfg):
    """``X_all`` holds the batch plus any triplet partners; indices are local."""
    enc, dec = model.encoder, model.decoder
    code, ecache = enc.forward(X_all)
    Xb = X_all[batch_local]
    out, dcache = dec.forward(code[batch_local])
    diff = out - Xb
    l_mse = float(np.mean(diff * diff))
    d_out = 2.0 * diff / diff.size
    if triples_local:
        t = np.asarray(triples_local)
        l_tri, ga, gp, gn = triplet_margin_loss_grad(code[t[:, 0]], code[t[:, 1]], code[t[:, 2]], cfg.triplet_margin)
    else:
        l_tri, ga = 0.0, None
    w = model.kendall
    loss = kendall_combined_loss(l_tri, l_mse, w)
    k_tri, k_mse, ds1, ds2 = kendall_combined_grad(l_tri, l_mse, w)
    if not triples_local:
        ds1 = 0.0
    gWd, gbd, dcode_b = dec.backward(dcache, k_mse * d_out)
    dcode = np.zeros_like(code)
    np.add.at(dcode, batch_local, dcode_b)
    if ga is not None:
        np.add.at(dcode, t[:, 0], k_tri * ga)
        np.add.at(dcode, t[:, 1], k_tri * gp)
        np.add.at(dcode, t[:, 2], k_tri * gn)
    gWe, gbe, _ = enc.backward(ecache, dcode)
    return loss, l_mse, gWe, gbe, gWd, gbd, ds1, ds2


def train_autoencoder(images, labels, config=None, rng=None, model=None):
    """Train an :class:`EncoderDecoder` on ``images`` (flattened internally).

    Returns ``(model, TrainLog)``.  Aborts with :class:`NumericError` if the
    loss becomes non-finite.
    """
    cfg = config or AutoencoderConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(images) == 0:
        raise ConfigError("cannot train an autoencoder on an empty dataset")
    X = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    labels = np.asarray(labels)
    if cfg.loss not in ("contractive", "triplet_mse"):
        raise ConfigError(f"unknown autoencoder loss {cfg.loss!r}")
    if model is None:
        model = EncoderDecoder(X.shape[1], cfg.bottleneck, cfg.hidden, rng=rng, kendall_init=cfg.kendall_init)
    opt = adam_optimizer(lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas)
    params = model.params()
    kend = {"kendall": np.array([model.kendall.s1, model.kendall.s2])}
    kopt = adam_optimizer(lr=cfg.lr, weight_decay=0.0, betas=cfg.betas)
    tlog = TrainLog()
    n = len(X)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        tot, steps = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            bidx = perm[s:s + cfg.batch_size]
            if cfg.loss == "contractive":
                res = _contractive_batch(model, X[bidx], cfg.contractive_lambda)
            else:
                triples = triplet_miner(labels, bidx, rng)
                extra = sorted({i for t in triples for i in t[1:]} - set(bidx.tolist()))
                idx_all = np.concatenate([bidx, np.asarray(extra, dtype=np.int64)])
                local = {int(g): i for i, g in enumerate(idx_all)}
                tl = [(local[a], local[p], local[q]) for a, p, q in triples]
                res = _triplet_mse_batch(model, X[idx_all], np.arange(len(bidx)), tl, cfg)
            loss, recon, gWe, gbe, gWd, gbd, ds1, ds2 = res
            if not math.isfinite(loss):
                raise NumericError(f"autoencoder diverged at epoch {epoch} step {steps}: loss={loss}")
            grads = {}
            for i in range(len(gWe)):
                grads[f"enc.{i}.W"], grads[f"enc.{i}.b"] = gWe[i], gbe[i]
            for i in range(len(gWd)):
                grads[f"dec.{i}.W"], grads[f"dec.{i}.b"] = gWd[i], gbd[i]
            adam_step(params, grads, opt)
            if cfg.loss == "triplet_mse":
                adam_step(kend, {"kendall": np.array([ds1, ds2])}, kopt)
                model.kendall = KendallWeights(float(kend["kendall"][0]), float(kend["kendall"][1]))
            tlog.step_recon.append(recon)
            tot += loss
            steps += 1
        tlog.epoch_loss.append(tot / max(steps, 1))
        log.info("autoencoder epoch %d loss %.6f", epoch + 1, tlog.epoch_loss[-1])
    return model, tlog


def records_from(emb):
    return [EmbeddingRecord(int(i), int(c), v) for i, c, v in zip(emb.ids, emb.labels, emb.vectors)]
