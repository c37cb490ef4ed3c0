"""A small differentiable architecture-search space.

A cell is a DAG over ``n_nodes + 1`` states.  State 0 is the cell input and
state ``j`` sums the outputs of every edge ``(i, j)`` with ``i < j``.  In the
mixed super-network each edge outputs ``sum_k softmax(alpha_e)_k * op_k(h)``;
the classifier head reads the last state.  Weights are trained with SGD on
one data stream and the logits ``alpha`` with Adam on another (first-order
alternation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .neuralnet import (Conv2D, Dense, ReLU, Tanh, adam_step, sgd_momentum_step, sgd_optimizer, softmax,
                        softmax_cross_entropy)

DEFAULT_OPS = ("zero", "skip", "dense_relu", "dense_tanh", "conv3x3")


# --------------------------------------------------------------------------
# candidate operations
# --------------------------------------------------------------------------

class Op:
    name = "op"

    def __init__(self):
        self.params, self.grads = {}, {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))


class Zero(Op):
    name = "zero"

    def forward(self, x):
        return np.zeros_like(x)

    def backward(self, g):
        return np.zeros_like(g)


class Skip(Op):
    name = "skip"

    def forward(self, x):
        return x

    def backward(self, g):
        return g


class DenseAct(Op):
    def __init__(self, dim, act, rng):
        self.name = f"dense_{act}"
        self.lin = Dense(dim, dim, rng=rng, init="he" if act == "relu" else "xavier")
        self.act = ReLU() if act == "relu" else Tanh()
        self.params, self.grads = self.lin.params, self.lin.grads

    def forward(self, x):
        return self.act.forward(self.lin.forward(x))

    def backward(self, g):
        return self.lin.backward(self.act.backward(g))


class ConvOp(Op):
    """ReLU(conv3x3(h)) with the flat state viewed as ``(C, H, W)``."""

    name = "conv3x3"

    def __init__(self, shape, rng):
        self.shape = tuple(shape)
        c = self.shape[0]
        self.conv = Conv2D(c, c, 3, rng=rng)
        self.act = ReLU()
        self.params, self.grads = self.conv.params, self.conv.grads

    def forward(self, x):
        y = self.conv.forward(x.reshape((x.shape[0],) + self.shape))
        return self.act.forward(y.reshape(x.shape[0], -1))

    def backward(self, g):
        g = self.act.backward(g).reshape((g.shape[0],) + self.shape)
        return self.conv.backward(g).reshape(g.shape[0], -1)


def make_op(name, shape, rng):
    dim = int(np.prod(shape))
    if name == "zero":
        return Zero()
    if name == "skip":
        return Skip()
    if name == "dense_relu":
        return DenseAct(dim, "relu", rng)
    if name == "dense_tanh":
        return DenseAct(dim, "tanh", rng)
    if name == "conv3x3":
        if len(shape) != 3:
            raise ConfigError("conv3x3 needs an image-shaped state (C, H, W)")
        return ConvOp(shape, rng)
    raise ConfigError(f"unknown operation {name!r}")


def op_param_count(name, shape):
    dim = int(np.prod(shape))
    if name in ("zero", "skip"):
        return 0
    if name in ("dense_relu", "dense_tanh"):
        return dim * dim + dim
    if name == "conv3x3":
        c = shape[0]
        return c * c * 9 + c
    raise ConfigError(f"unknown operation {name!r}")


def cell_edges(n_nodes):
    return [(i, j) for j in range(1, n_nodes + 1) for i in range(j)]


@dataclass
class OperationCatalog:
    names: tuple = DEFAULT_OPS

    def __post_init__(self):
        self.names = tuple(self.names)
        if not self.names:
            raise ConfigError("operation catalog is empty")
        if "zero" not in self.names:
            raise ConfigError("operation catalog must contain 'zero'")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate operation names in catalog")

    def param_count(self, name, shape):
        return op_param_count(name, shape)


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

class _CellNet:
    """Shared machinery: a stack of cells followed by a dense classifier head."""

    def _weight_items(self):
        raise NotImplementedError

    def weight_params(self):
        return {k: v for k, v in self._weight_items(grads=False)}

    def weight_grads(self):
        return {k: v for k, v in self._weight_items(grads=True)}

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.dim:
            raise ConfigError(f"input has {x.shape[1]} features, network expects {self.dim}")
        return x

    def predict_proba(self, x, batch=1024):
        x = self._flat(x)
        out = [softmax(self.forward(x[i:i + batch])) for i in range(0, len(x), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def accuracy(self, x, y):
        p = self.predict_proba(x)
        return float(np.mean(np.argmax(p, axis=1) == np.asarray(y))) if len(p) else 0.0


class MixedArchitecture(_CellNet):
    """Super-network with a softmax-relaxed operation choice on every edge."""

    def __init__(self, input_shape, n_classes, n_nodes=4, catalog=None, rng=None, alpha_scale=1e-3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_shape = tuple(input_shape)
        self.dim = int(np.prod(self.input_shape))
        self.n_classes = int(n_classes)
        self.n_nodes = int(n_nodes)
        if self.n_nodes < 1:
            raise ConfigError("a cell needs at least one intermediate node")
        self.catalog = catalog or OperationCatalog()
        names = self.catalog.names
        if "conv3x3" in names and len(self.input_shape) != 3:
            names = tuple(n for n in names if n != "conv3x3")
            self.catalog = OperationCatalog(names)
        self.edges = cell_edges(self.n_nodes)
        self.ops = [[make_op(n, self.input_shape, rng) for n in self.catalog.names] for _ in self.edges]
        self.alpha = alpha_scale * rng.standard_normal((len(self.edges), len(self.catalog.names)))
        self.alpha_grad = np.zeros_like(self.alpha)
        self.head = Dense(self.dim, self.n_classes, rng=rng, init="xavier")
        self.zero_grad()

    @property
    def op_names(self):
        return self.catalog.names

    def _weight_items(self, grads):
        for e, (i, j) in enumerate(self.edges):
            for op in self.ops[e]:
                src = op.grads if grads else op.params
                for k in op.params:
                    yield f"edge_{i}_{j}.{op.name}.{k}", src[k]
        src = self.head.grads if grads else self.head.params
        for k in self.head.params:
            yield f"head.{k}", src[k]

    def zero_grad(self):
        for row in self.ops:
            for op in row:
                op.zero_grad()
        self.head.zero_grad()
        self.alpha_grad[...] = 0.0

    def edge_weights(self):
        return softmax(self.alpha, axis=1)

    def forward(self, x):
        x = self._flat(x)
        w = self.edge_weights()
        states = [x] + [np.zeros_like(x) for _ in range(self.n_nodes)]
        self._outs = []
        for e, (i, j) in enumerate(self.edges):
            outs = []
            h = states[i]
            for k, op in enumerate(self.ops[e]):
                if op.name == "zero":
                    outs.append(None)
                    continue
                o = op.forward(h)
                outs.append(o)
                states[j] = states[j] + w[e, k] * o
            self._outs.append(outs)
        self._w = w
        self._states = states
        return self.head.forward(states[-1])

    def backward(self, dlogits):
        g_states = [np.zeros_like(s) for s in self._states]
        g_states[-1] = self.head.backward(dlogits)
        w = self._w
        for e in range(len(self.edges) - 1, -1, -1):
            i, j = self.edges[e]
            g = g_states[j]
            dw = np.zeros(w.shape[1])
            for k, op in enumerate(self.ops[e]):
                o = self._outs[e][k]
                if o is None:
                    continue
                dw[k] = np.sum(g * o)
                g_states[i] += op.backward(w[e, k] * g)
            self.alpha_grad[e] += w[e] * (dw - np.dot(w[e], dw))
        return g_states[0]

    def loss_and_grads(self, x, y):
        self.zero_grad()
        logits = self.forward(x)
        loss, probs, dl = softmax_cross_entropy(logits, y)
        self.backward(dl)
        return loss, probs


def mixed_param_count(arch):
    """Scalar weights in the super-network: every candidate op plus the head (logits excluded)."""
    total = sum(op_param_count(n, arch.input_shape) for _ in arch.edges for n in arch.op_names)
    return total + arch.dim * arch.n_classes + arch.n_classes


@dataclass
class DiscreteArchitecture:
    """Chosen operation per edge, plus weights inherited from the super-network."""

    input_shape: tuple
    n_classes: int
    n_nodes: int
    op_names: tuple
    choice: list                       # op index per edge
    weights: dict = field(default_factory=dict)

    @property
    def edges(self):
        return cell_edges(self.n_nodes)

    @property
    def genotype(self):
        return [(i, j, self.op_names[c]) for (i, j), c in zip(self.edges, self.choice)]

    def genotype_text(self):
        return "".join(f"edge_{i}_{j}: {name}\n" for i, j, name in self.genotype)


def parse_genotype(text):
    """Inverse of :meth:`DiscreteArchitecture.genotype_text`: ``[(i, j, op_name), ...]``."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, name = (s.strip() for s in line.split(":", 1))
        _, i, j = key.split("_")
        out.append((int(i), int(j), name))
    return out


def discretize(arch, exclude_zero=True):
    """Per-edge argmax of the operation weights (lowest index wins ties)."""
    names = arch.op_names
    choice = []
    for e in range(len(arch.edges)):
        row = arch.alpha[e].copy()
        if exclude_zero and len(names) > 1:
            row[names.index("zero")] = -np.inf
        choice.append(int(np.argmax(row)))
    weights = {}
    for e, (i, j) in enumerate(arch.edges):
        op = arch.ops[e][choice[e]]
        for k, v in op.params.items():
            weights[f"edge_{i}_{j}.{k}"] = v.copy()
    for k, v in arch.head.params.items():
        weights[f"head.{k}"] = v.copy()
    return DiscreteArchitecture(arch.input_shape, arch.n_classes, arch.n_nodes, tuple(names), choice, weights)


class DiscreteNet(_CellNet):
    """Stack of ``cells`` copies of a discrete cell plus the classifier head.

    With ``inherit`` the first cell and the head start from the super-network
    weights; further cells start as fresh initialisations.
    """

    def __init__(self, d, cells=1, inherit=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_shape = tuple(d.input_shape)
        self.dim = int(np.prod(self.input_shape))
        self.n_classes = d.n_classes
        self.edges = d.edges
        self.names = [d.op_names[c] for c in d.choice]
        self.cells = [[make_op(n, self.input_shape, rng) for n in self.names] for _ in range(cells)]
        self.head = Dense(self.dim, self.n_classes, rng=rng, init="xavier")
        if inherit and d.weights:
            for e, (i, j) in enumerate(self.edges):
                for k, v in self.cells[0][e].params.items():
                    v[...] = d.weights[f"edge_{i}_{j}.{k}"]
            for k, v in self.head.params.items():
                v[...] = d.weights[f"head.{k}"]
        self.zero_grad()

    def _weight_items(self, grads):
        for c, cell in enumerate(self.cells):
            for e, (i, j) in enumerate(self.edges):
                op = cell[e]
                src = op.grads if grads else op.params
                for k in op.params:
                    yield f"cell{c}.edge_{i}_{j}.{k}", src[k]
        src = self.head.grads if grads else self.head.params
        for k in self.head.params:
            yield f"head.{k}", src[k]

    def zero_grad(self):
        for cell in self.cells:
            for op in cell:
                op.zero_grad()
        self.head.zero_grad()

    def forward(self, x):
        h = self._flat(x)
        self._trace = []
        n_nodes = self.edges[-1][1]
        for cell in self.cells:
            states = [h] + [np.zeros_like(h) for _ in range(n_nodes)]
            for e, (i, j) in enumerate(self.edges):
                if cell[e].name != "zero":
                    states[j] = states[j] + cell[e].forward(states[i])
            self._trace.append(states)
            h = states[-1]
        return self.head.forward(h)

    def backward(self, dlogits):
        g = self.head.backward(dlogits)
        for cell, states in zip(reversed(self.cells), reversed(self._trace)):
            gs = [np.zeros_like(s) for s in states]
            gs[-1] = g
            for e in range(len(self.edges) - 1, -1, -1):
                i, j = self.edges[e]
                if cell[e].name != "zero":
                    gs[i] += cell[e].backward(gs[j])
            g = gs[0]
        return g

    def n_params(self):
        return int(sum(v.size for v in self.weight_params().values()))


def count_params(d, cells=1):
    """Exact scalar parameter count of the discretised network, head included."""
    per_cell = sum(op_param_count(d.op_names[c], d.input_shape) for c in d.choice)
    dim = int(np.prod(d.input_shape))
    return cells * per_cell + dim * d.n_classes + d.n_classes


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _finite_or_raise(loss, what):
    if not math.isfinite(loss):
        raise NumericError(f"{what} loss is not finite ({loss})")


def alternating_step(arch, train_batch, val_batch, weight_opt, arch_opt):
    """One SGD update of the weights on ``train_batch`` then one Adam update of alpha on ``val_batch``.

    Batches are ``(x, y)`` pairs.  Returns ``(train_loss, val_loss)``.
    """
    xt, yt = train_batch
    loss_t, _ = arch.loss_and_grads(xt, yt)
    _finite_or_raise(loss_t, "weight-step")
    sgd_momentum_step(arch.weight_params(), arch.weight_grads(), weight_opt)
    xv, yv = val_batch
    loss_v, _ = arch.loss_and_grads(xv, yv)
    _finite_or_raise(loss_v, "architecture-step")
    adam_step({"alpha": arch.alpha}, {"alpha": arch.alpha_grad}, arch_opt)
    return loss_t, loss_v


def fine_tune(d, train_x, train_y, test_x, test_y, epochs=1, lr=0.01, momentum=0.9, weight_decay=3e-4,
              batch_size=64, cells=1, inherit=True, rng=None):
    """Train the discrete network on the full training set; return ``(accuracy, net)``.

    Raises :class:`NumericError` on divergence.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    net = DiscreteNet(d, cells=cells, inherit=inherit, rng=rng)
    opt = sgd_optimizer(lr=lr, weight_decay=weight_decay, momentum=momentum)
    X = net._flat(train_x)
    y = np.asarray(train_y)
    n = len(X)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            b = perm[s:s + batch_size]
            net.zero_grad()
            loss, _, dl = softmax_cross_entropy(net.forward(X[b]), y[b])
            _finite_or_raise(loss, "fine-tune")
            net.backward(dl)
            sgd_momentum_step(net.weight_params(), net.weight_grads(), opt)
    return net.accuracy(test_x, test_y), net
