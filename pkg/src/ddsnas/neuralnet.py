"""Small numpy neural-network kernels with hand-written backward passes.

Every layer caches what it needs during ``forward`` and consumes it in
``backward``; gradients are accumulated into ``layer.grads`` under the same
keys as ``layer.params``.  Arrays are float64 throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# Functional kernels
# --------------------------------------------------------------------------

def forward_dense(x, weights, bias):
    """Affine map ``x @ weights + bias``; ``x`` may be 1-D or batched."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ConfigError(f"dense shape mismatch: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ConfigError(f"dense shape mismatch: bias {bias.shape} vs weights {weights.shape}")
    return x @ weights + bias


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def cross_entropy(logits, label):
    """Return ``(loss, prob_true)`` for a single example.

    ``loss = -log softmax(logits)[label]`` and ``prob_true`` is the softmax
    probability of the true class.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite("logits", logits)
    if not 0 <= label < logits.shape[-1]:
        raise ConfigError(f"label {label} out of range for {logits.shape[-1]} classes")
    logp = log_softmax(logits)[label]
    return float(-logp), float(math.exp(logp))


def softmax_cross_entropy(logits, labels):
    """Batched mean cross-entropy.

    Returns ``(mean_loss, probs, dlogits)`` where ``dlogits`` is the gradient
    of the mean loss with respect to the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite("logits", logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    loss = -np.mean(logp[np.arange(n), labels])
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), probs, dlogits


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

class Layer:
    params: dict
    grads: dict

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, init="he"):
        if n_in <= 0 or n_out <= 0:
            raise ConfigError("dense layer dimensions must be positive")
        self.n_in, self.n_out = n_in, n_out
        if init == "zeros":
            W = np.zeros((n_in, n_out))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            gain = 2.0 if init == "he" else 1.0
            W = rng.normal(0.0, math.sqrt(gain / n_in), size=(n_in, n_out))
        self.params = {"W": W, "b": np.zeros(n_out)}
        self.grads = {}
        self.zero_grad()
        self._x = None

    def forward(self, x):
        self._x = x
        return forward_dense(x, self.params["W"], self.params["b"])

    def backward(self, g):
        x = self._x
        self.grads["W"] += x.T @ g
        self.grads["b"] += g.sum(axis=0)
        return g @ self.params["W"].T


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return g * self._mask


class Tanh(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y ** 2)


class Sigmoid(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


class Conv2D(Layer):
    """Stride-1, same-padding 2-D convolution on ``(B, C, H, W)`` inputs.

    Only odd kernel sizes are supported so that "same" padding is symmetric.
    """

    def __init__(self, c_in, c_out, kernel=3, rng=None, init="he"):
        if kernel % 2 != 1:
            raise ConfigError("conv kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        fan_in = c_in * kernel * kernel
        if init == "zeros":
            K = np.zeros((c_out, c_in, kernel, kernel))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            gain = 2.0 if init == "he" else 1.0
            K = rng.normal(0.0, math.sqrt(gain / fan_in), size=(c_out, c_in, kernel, kernel))
        self.params = {"K": K, "b": np.zeros(c_out)}
        self.grads = {}
        self.zero_grad()

    def _windows(self, x):
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (B, C, H, W, k, k)
        return sliding_window_view(xp, (self.k, self.k), axis=(2, 3))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ConfigError(f"conv expects (B, {self.c_in}, H, W), got {x.shape}")
        self._win = self._windows(x)
        out = np.einsum("bchwij,ocij->bohw", self._win, self.params["K"], optimize=True)
        return out + self.params["b"][None, :, None, None]

    def backward(self, g):
        self.grads["K"] += np.einsum("bohw,bchwij->ocij", g, self._win, optimize=True)
        self.grads["b"] += g.sum(axis=(0, 2, 3))
        # input gradient: correlate the padded upstream grad with the flipped kernel
        gwin = self._windows(g)
        flipped = self.params["K"][:, :, ::-1, ::-1]
        return np.einsum("bohwij,ocij->bchw", gwin, flipped, optimize=True)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def params(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def forward(self, x):
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, g):
        for l in reversed(self.layers):
            g = l.backward(g)
        return g


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-parameter buffers plus hyperparameters for one optimizer.

    ``kind`` is ``"adam"`` or ``"sgd-momentum"``.  Weight decay is added to
    the gradient (classical L2) unless ``decoupled`` is set, in which case it
    is applied directly to the parameter as ``p -= lr * wd * p``.
    """

    kind: str
    lr: float
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    momentum: float = 0.9
    eps: float = 1e-8
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")


def adam_optimizer(lr=3e-4, weight_decay=1e-3, betas=(0.5, 0.999), **kw):
    return OptimizerState("adam", lr=lr, weight_decay=weight_decay, betas=tuple(betas), **kw)


def sgd_optimizer(lr=0.01, weight_decay=3e-4, momentum=0.9, **kw):
    return OptimizerState("sgd-momentum", lr=lr, weight_decay=weight_decay, momentum=momentum, **kw)


def _check_grads(params, grads):
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")


def adam_step(params, grads, state):
    """One in-place Adam update of every array in ``params``."""
    if state.kind != "adam":
        raise ConfigError("adam_step requires an adam OptimizerState")
    _check_grads(params, grads)
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        if state.weight_decay and state.decoupled:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def sgd_momentum_step(params, grads, state):
    """One in-place SGD step with heavy-ball momentum ``v = mu*v + g``."""
    if state.kind != "sgd-momentum":
        raise ConfigError("sgd_momentum_step requires an sgd-momentum OptimizerState")
    _check_grads(params, grads)
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        v = state.m.get(name)
        if v is None:
            v = state.m[name] = np.zeros_like(p)
        v *= state.momentum
        v += g
        if state.weight_decay and state.decoupled:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * v
    return params, state


def optimizer_step(params, grads, state):
    if state.kind == "adam":
        return adam_step(params, grads, state)
    return sgd_momentum_step(params, grads, state)


# --------------------------------------------------------------------------
# Learning-rate schedules
# --------------------------------------------------------------------------

@dataclass
class CyclicLrSchedule:
    """Triangular cyclic learning rate.

    Ramps linearly from ``base_lr`` to ``max_lr`` over ``step_size_up``
    steps, back down over ``step_size_down`` steps, and repeats.
    """

    base_lr: float = 0.001
    max_lr: float = 0.01
    step_size_up: int = 10
    step_size_down: int = 10
    current_step: int = 0

    def __post_init__(self):
        if not self.base_lr < self.max_lr:
            raise ConfigError("cyclic schedule needs base_lr < max_lr")
        if self.step_size_up <= 0 or self.step_size_down <= 0:
            raise ConfigError("cyclic schedule step sizes must be positive")

    def lr(self):
        return cyclic_lr(self)

    def step(self):
        self.current_step += 1
        return self.lr()

    def reset_to_max(self):
        return reset_lr_to_max(self)


def cyclic_lr(schedule):
    s = schedule
    period = s.step_size_up + s.step_size_down
    pos = s.current_step % period
    span = s.max_lr - s.base_lr
    if pos <= s.step_size_up:
        lr = s.base_lr + span * pos / s.step_size_up
    else:
        lr = s.max_lr - span * (pos - s.step_size_up) / s.step_size_down
    return min(max(lr, s.base_lr), s.max_lr)


def reset_lr_to_max(schedule):
    """Reposition the schedule at its peak so the next lr is ``max_lr``."""
    schedule.current_step = schedule.step_size_up
    return schedule


@dataclass
class CosineLrSchedule:
    """Cosine annealing from ``max_lr`` to ``min_lr`` over ``t_max`` steps."""

    max_lr: float = 0.025
    min_lr: float = 0.0
    t_max: int = 50
    current_step: int = 0

    def lr(self):
        t = min(self.current_step, self.t_max)
        return self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1 + math.cos(math.pi * t / self.t_max))

    def step(self):
        self.current_step += 1
        return self.lr()

    def reset_to_max(self):
        self.current_step = 0
        return self


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def numerical_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
