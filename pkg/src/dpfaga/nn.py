"""Minimal dense-tensor reverse-mode gradient engine and training loop.

Tensors are 2-D float64 matrices. Operations build a define-by-run tape;
`Tensor.backward()` accumulates exact gradients into every upstream tensor.
Everything is sized for desk-scale experiments: full-batch training, no
broadcasting beyond row-vector biases, no GPU.

Besides the usual dense primitives there are three batched graph primitives
(`graph_propagate`, `pair_scores`, `block_matmul`) operating on matrices of
B stacked per-sample node blocks of N rows each, so message passing over a
fixed N-node graph stays vectorized across a whole batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateRange(ValueError):
    """A truth dimension has zero range; NRMSE is undefined for it."""


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}")


def _as_matrix(data) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return a


class Tensor:
    """A 2-D value node on the tape."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = _as_matrix(data)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape[1] == b.shape[0], f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def back(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)
    out._backward = back
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add: shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, parents=(a, b))

    def back(g):
        a._accum(g)
        b._accum(g)
    out._backward = back
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"sub: shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, parents=(a, b))

    def back(g):
        a._accum(g)
        b._accum(-g)
    out._backward = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mul: shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, parents=(a, b))

    def back(g):
        a._accum(g * b.data)
        b._accum(g * a.data)
    out._backward = back
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, parents=(a,))
    out._backward = lambda g: a._accum(g * c)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (1, cols) bias row to every row of x."""
    _require(b.shape == (1, x.shape[1]),
             f"add_bias: bias shape {b.shape} does not match columns of {x.shape}")
    out = Tensor(x.data + b.data, parents=(x, b))

    def back(g):
        x._accum(g)
        b._accum(g.sum(axis=0, keepdims=True))
    out._backward = back
    return out


def affine_cols(x: Tensor, col_scale: np.ndarray, col_shift: np.ndarray) -> Tensor:
    """Constant per-column affine map x * scale + shift (used for unscaling)."""
    s = np.asarray(col_scale, dtype=float).reshape(1, -1)
    m = np.asarray(col_shift, dtype=float).reshape(1, -1)
    _require(s.shape[1] == x.shape[1] and m.shape[1] == x.shape[1],
             f"affine_cols: {s.shape}/{m.shape} do not match columns of {x.shape}")
    out = Tensor(x.data * s + m, parents=(x,))
    out._backward = lambda g: x._accum(g * s)
    return out


ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        y = 1.0 / (1.0 + np.exp(-x.data))
        out = Tensor(y, parents=(x,))
        out._backward = lambda g: x._accum(g * y * (1.0 - y))
    elif kind == "tanh":
        y = np.tanh(x.data)
        out = Tensor(y, parents=(x,))
        out._backward = lambda g: x._accum(g * (1.0 - y * y))
    elif kind == "relu":
        y = np.maximum(x.data, 0.0)
        out = Tensor(y, parents=(x,))
        out._backward = lambda g: x._accum(g * (x.data > 0.0))
    elif kind == "identity":
        out = Tensor(x.data, parents=(x,))
        out._backward = lambda g: x._accum(g)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape[0] == b.shape[0], f"concat: row counts differ, {a.shape} vs {b.shape}")
    na = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), parents=(a, b))

    def back(g):
        a._accum(g[:, :na])
        b._accum(g[:, na:])
    out._backward = back
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    p = _softmax(x.data)
    out = Tensor(p, parents=(x,))

    def back(g):
        x._accum(p * (g - (g * p).sum(axis=1, keepdims=True)))
    out._backward = back
    return out


def masked_softmax_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to entries where mask is True; others get 0.

    Every row must have at least one True entry.
    """
    _require(mask.shape == x.shape, f"mask shape {mask.shape} does not match {x.shape}")
    # arithmetic masking: shift by the masked row max, exponentiate, zero out
    neg = np.float64(-1e300)
    masked = np.where(mask, x.data, neg)
    z = x.data - masked.max(axis=1, keepdims=True)
    e = np.exp(np.minimum(z, 0.0)) * mask
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, parents=(x,))

    def back(g):
        x._accum(p * (g - (g * p).sum(axis=1, keepdims=True)))
    out._backward = back
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([[x.data.mean()]]), parents=(x,))
    inv = 1.0 / x.data.size
    out._backward = lambda g: x._accum(np.full_like(x.data, g[0, 0] * inv))
    return out


def mse_loss(pred: Tensor, truth: np.ndarray) -> Tensor:
    truth = _as_matrix(truth)
    _require(pred.shape == truth.shape, f"mse: shapes differ, {pred.shape} vs {truth.shape}")
    diff = pred.data - truth
    out = Tensor(np.array([[np.mean(diff * diff)]]), parents=(pred,))
    coef = 2.0 / diff.size
    out._backward = lambda g: pred._accum(g[0, 0] * coef * diff)
    return out


def cross_entropy_rows(logits: Tensor, targets: np.ndarray,
                       row_weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean cross-entropy of row-softmax(logits) against target rows.

    Targets are probability rows (one-hots or soft); rows with zero weight
    contribute nothing. The gradient is the exact fused softmax+CE form.
    """
    targets = _as_matrix(targets)
    _require(logits.shape == targets.shape,
             f"cross_entropy: shapes differ, {logits.shape} vs {targets.shape}")
    n = logits.shape[0]
    w = np.ones(n) if row_weights is None else np.asarray(row_weights, dtype=float)
    _require(w.shape == (n,), f"cross_entropy: weights shape {w.shape}, expected ({n},)")
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    p = _softmax(logits.data)
    logp = np.log(np.clip(p, 1e-300, None))
    val = -(w[:, None] * targets * logp).sum() / total
    out = Tensor(np.array([[val]]), parents=(logits,))
    coef = w[:, None] / total

    def back(g):
        logits._accum(g[0, 0] * coef * (p - targets))
    out._backward = back
    return out


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T, parents=(x,))
    out._backward = lambda g: x._accum(g.T)
    return out


def graph_propagate(x: Tensor, a_hat: np.ndarray, n_nodes: int) -> Tensor:
    """Apply a constant (N, N) operator to every N-row block of x.

    x is (B*N, F); result block b is a_hat @ x_b. Gradient applies a_hat^T
    blockwise.
    """
    _require(x.shape[0] % n_nodes == 0,
             f"graph_propagate: rows {x.shape[0]} not a multiple of n_nodes {n_nodes}")
    _require(a_hat.shape == (n_nodes, n_nodes),
             f"graph_propagate: operator shape {a_hat.shape}, expected {(n_nodes, n_nodes)}")
    bsz = x.shape[0] // n_nodes
    f = x.shape[1]
    xb = x.data.reshape(bsz, n_nodes, f)
    out = Tensor((a_hat @ xb).reshape(bsz * n_nodes, f), parents=(x,))
    a_hat_t = a_hat.T.copy()

    def back(g):
        gb = g.reshape(bsz, n_nodes, f)
        x._accum((a_hat_t @ gb).reshape(bsz * n_nodes, f))
    out._backward = back
    return out


def pair_scores(s: Tensor, t: Tensor, n_nodes: int) -> Tensor:
    """Per-block pairwise score matrix: out[b*N+i, j] = s[b*N+i] + t[b*N+j].

    s and t are (B*N, 1) columns; the result is (B*N, N). This is the
    factored form of scoring every (node, neighbor) pair with a split
    attention vector: a two-block vector dotted with a concatenated pair
    equals one dot with the source half plus one with the target half.
    """
    _require(s.shape == t.shape and s.shape[1] == 1,
             f"pair_scores: need equal (B*N, 1) columns, got {s.shape} and {t.shape}")
    _require(s.shape[0] % n_nodes == 0,
             f"pair_scores: rows {s.shape[0]} not a multiple of n_nodes {n_nodes}")
    bsz = s.shape[0] // n_nodes
    tb = t.data.reshape(bsz, n_nodes)
    out_data = s.data + np.repeat(tb, n_nodes, axis=0)
    out = Tensor(out_data, parents=(s, t))

    def back(g):
        s._accum(g.sum(axis=1, keepdims=True))
        t._accum(g.reshape(bsz, n_nodes, n_nodes).sum(axis=1).reshape(bsz * n_nodes, 1))
    out._backward = back
    return out


def block_matmul(lmb: Tensor, h: Tensor, n_nodes: int) -> Tensor:
    """Per-block product: out_b = lmb_b @ h_b for each of the B stacked blocks.

    lmb is (B*N, N) (for example attention rows), h is (B*N, F).
    """
    _require(lmb.shape[0] == h.shape[0] and lmb.shape[1] == n_nodes,
             f"block_matmul: incompatible shapes {lmb.shape} and {h.shape} for N={n_nodes}")
    _require(h.shape[0] % n_nodes == 0,
             f"block_matmul: rows {h.shape[0]} not a multiple of n_nodes {n_nodes}")
    bsz = h.shape[0] // n_nodes
    f = h.shape[1]
    lb = lmb.data.reshape(bsz, n_nodes, n_nodes)
    hb = h.data.reshape(bsz, n_nodes, f)
    out = Tensor(np.matmul(lb, hb).reshape(bsz * n_nodes, f), parents=(lmb, h))

    def back(g):
        gb = g.reshape(bsz, n_nodes, f)
        lmb._accum(np.matmul(gb, hb.transpose(0, 2, 1)).reshape(bsz * n_nodes, n_nodes))
        h._accum(np.matmul(lb.transpose(0, 2, 1), gb).reshape(bsz * n_nodes, f))
    out._backward = back
    return out


def unstack_merge(h: Tensor, n_nodes: int) -> Tensor:
    """(B*N, C) stacked node outputs -> (B, C*N) flat rows, channel-blocked.

    Column layout of the result groups by channel: all nodes' channel 0,
    then all nodes' channel 1, matching [p_0..p_{N-1}, q_0..q_{N-1}]-style
    vectors.
    """
    _require(h.shape[0] % n_nodes == 0,
             f"unstack_merge: rows {h.shape[0]} not a multiple of n_nodes {n_nodes}")
    bsz = h.shape[0] // n_nodes
    c = h.shape[1]
    out = Tensor(h.data.reshape(bsz, n_nodes, c).transpose(0, 2, 1).reshape(bsz, c * n_nodes),
                 parents=(h,))

    def back(g):
        h._accum(g.reshape(bsz, c, n_nodes).transpose(0, 2, 1).reshape(bsz * n_nodes, c))
    out._backward = back
    return out


def split_stack(x: np.ndarray, n_nodes: int) -> np.ndarray:
    """(B, C*N) channel-blocked flat rows -> (B*N, C) stacked node features.

    Plain numpy (inputs are constants on the tape); inverse of unstack_merge.
    """
    bsz, width = x.shape
    if width % n_nodes != 0:
        raise ShapeError(f"split_stack: width {width} not a multiple of n_nodes {n_nodes}")
    c = width // n_nodes
    return x.reshape(bsz, c, n_nodes).transpose(0, 2, 1).reshape(bsz * n_nodes, c)


# ---------------------------------------------------------------------------
# parameters and optimizers

class ParamStore:
    """Named parameter tensors with their gradients."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(array, dtype=float))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict:
        """Copy of all parameter arrays, keyed by name."""
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            arr = _as_matrix(v)
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if self._params[k].data.shape != arr.shape:
                raise ShapeError(f"parameter {k!r}: stored shape {arr.shape} "
                                 f"!= model shape {self._params[k].data.shape}")
            self._params[k].data = arr.copy()

    def to_jsonable(self) -> dict:
        return {k: t.data.tolist() for k, t in self._params.items()}


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-lim, lim, size=(rows, cols))


class SGD:
    def __init__(self, params: ParamStore, lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for t in self.params.tensors():
            if t.grad is not None:
                t.data = t.data - self.lr * t.grad


class Adam:
    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * p.grad
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * p.grad ** 2
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(name: str, params: ParamStore, lr: float):
    name = name.lower()
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")


# ---------------------------------------------------------------------------
# metrics

def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def nrmse(pred: np.ndarray, truth: np.ndarray, skip_constant: bool = False) -> float:
    """Per-dimension RMSE divided by the truth range, averaged over dimensions.

    Dimensions are columns. A constant truth dimension has no range; it
    raises DegenerateRange unless skip_constant drops it from the average.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape:
        raise ShapeError(f"nrmse: shapes differ, {pred.shape} vs {truth.shape}")
    rng_ = truth.max(axis=0) - truth.min(axis=0)
    flat = rng_ <= 0.0
    if flat.any() and not skip_constant:
        raise DegenerateRange(f"truth dimensions {np.where(flat)[0].tolist()} are constant")
    keep = ~flat
    if not keep.any():
        raise DegenerateRange("all truth dimensions are constant")
    rmse = np.sqrt(np.mean((pred[:, keep] - truth[:, keep]) ** 2, axis=0))
    return float(np.mean(rmse / rng_[keep]))


# ---------------------------------------------------------------------------
# training

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    activation: str = "tanh"
    seed: int = 0
    early_stop: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # zero is allowed so a no-op training step stays expressible
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer.lower() not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LossCurves:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train, self.val)):
                w.writerow([i, repr(tr), repr(va)])

    def best_val_epoch(self) -> int:
        return int(np.argmin(self.val))


def _data_pair(data):
    if hasattr(data, "x") and hasattr(data, "y"):
        return np.asarray(data.x, dtype=float), np.asarray(data.y, dtype=float)
    x, y = data
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def train(model, train_data, val_data, cfg: TrainConfig):
    """Full-batch gradient training with per-epoch train/val loss recording.

    The model must expose `params` (a ParamStore), `loss_tensor(X, Y)`
    returning a scalar tape node, and `fit_scalers(X, Y)`. The state with
    the best validation loss is restored into the model and returned along
    with the loss curves. Raises NonFiniteLoss when training diverges.
    """
    x_tr, y_tr = _data_pair(train_data)
    x_va, y_va = _data_pair(val_data)
    if x_tr.size == 0 or x_va.size == 0:
        raise ValueError("datasets must be non-empty")
    model.fit_scalers(x_tr, y_tr)
    opt = make_optimizer(cfg.optimizer, model.params, cfg.learning_rate)
    curves = LossCurves()
    best_val = math.inf
    best_state = model.params.state_dict()
    since_best = 0
    for epoch in range(cfg.epochs):
        loss = model.loss_tensor(x_tr, y_tr)
        tr_loss = float(loss.data[0, 0])
        if not math.isfinite(tr_loss):
            raise NonFiniteLoss(epoch, tr_loss)
        loss.backward()
        opt.step()
        val_loss = float(model.loss_tensor(x_va, y_va).data[0, 0])
        curves.train.append(tr_loss)
        curves.val.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.params.state_dict()
            since_best = 0
        else:
            since_best += 1
            if cfg.early_stop is not None and since_best >= cfg.early_stop:
                break
    model.params.load_state_dict(best_state)
    return best_state, curves
