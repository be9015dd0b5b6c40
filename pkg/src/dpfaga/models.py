"""The three load-to-voltage regressors: FCNN, GNN, and GAT.

All take a flat (B, 2N) load matrix [p_0..p_{N-1}, q_0..q_{N-1}] per row and
produce a flat (B, 2N) voltage matrix [vmag..., vang...]. The graph models
reshape rows into per-bus feature pairs and pass messages over the grid
topology; the FCNN treats the row as one unstructured vector.

Inputs and targets are standardized per column by default (constant columns
are left unscaled); predictions are returned in raw units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .grid import GridCase
from .nn import ParamStore, Tensor, glorot_uniform

FCNN_KIND = "fcnn"
GNN_KIND = "gnn"
GAT_KIND = "gat"
MODEL_KINDS = (FCNN_KIND, GNN_KIND, GAT_KIND)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hidden_dims: tuple = (32, 32)
    activation: str = "tanh"
    attention_activation: str = "tanh"   # used by GAT only
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if len(self.hidden_dims) == 0:
            raise ValueError("hidden_dims must be non-empty")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims)


@dataclass(frozen=True)
class TopologyGraph:
    """Bus adjacency with self-loops and its symmetric-normalized operator."""

    n: int
    adjacency: np.ndarray    # 0/1, zero diagonal
    a_hat: np.ndarray        # D^{-1/2} (A + I) D^{-1/2}
    mask: np.ndarray         # bool, (A + I) > 0

    @classmethod
    def from_edges(cls, n: int, edges) -> "TopologyGraph":
        a = np.zeros((n, n))
        for i, j in edges:
            if i == j:
                continue
            a[i, j] = 1.0
            a[j, i] = 1.0
        a_loop = a + np.eye(n)
        d = a_loop.sum(axis=1)
        d_inv_sqrt = 1.0 / np.sqrt(d)
        a_hat = a_loop * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
        g = cls(n=n, adjacency=a, a_hat=a_hat, mask=a_loop > 0)
        a.flags.writeable = False
        a_hat.flags.writeable = False
        g.mask.flags.writeable = False
        return g

    @classmethod
    def from_case(cls, case: GridCase) -> "TopologyGraph":
        return cls.from_edges(case.n_bus, [(br.from_bus, br.to_bus) for br in case.branches])

    def permuted(self, perm: np.ndarray) -> "TopologyGraph":
        """Graph after relabeling node i -> perm[i]."""
        edges = [(perm[i], perm[j]) for i in range(self.n) for j in range(i + 1, self.n)
                 if self.adjacency[i, j] > 0]
        return TopologyGraph.from_edges(self.n, edges)


class _ScaledModel:
    """Shared input/target standardization and checkpoint plumbing."""

    def fit_scalers(self, x: np.ndarray, y: np.ndarray) -> None:
        if not self.spec.normalize:
            return
        self.x_mu = x.mean(axis=0)
        self.x_sd = _safe_sd(x.std(axis=0))
        self.y_mu = y.mean(axis=0)
        self.y_sd = _safe_sd(y.std(axis=0))

    def _scale_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mu) / self.x_sd

    def _scale_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mu) / self.y_sd

    def loss_tensor(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        out = self._forward_scaled(self._scale_x(x))
        return nn.mse_loss(out, self._scale_y(y))

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self._forward_scaled(self._scale_x(np.asarray(x, dtype=float)))
        return out.data * self.y_sd + self.y_mu

    def scaler_state(self) -> dict:
        return {"x_mu": self.x_mu.tolist(), "x_sd": self.x_sd.tolist(),
                "y_mu": self.y_mu.tolist(), "y_sd": self.y_sd.tolist()}

    def load_scaler_state(self, s: dict) -> None:
        self.x_mu = np.array(s["x_mu"], dtype=float)
        self.x_sd = np.array(s["x_sd"], dtype=float)
        self.y_mu = np.array(s["y_mu"], dtype=float)
        self.y_sd = np.array(s["y_sd"], dtype=float)


def _safe_sd(sd: np.ndarray) -> np.ndarray:
    out = sd.copy()
    out[out == 0.0] = 1.0
    return out


class FCNN(_ScaledModel):
    """Dense stack with a linear output layer."""

    def __init__(self, spec: ModelSpec, n_in: int, n_out: int, seed: int = 0):
        self.spec = spec
        self.n_in = n_in
        self.n_out = n_out
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        dims = [n_in, *spec.hidden_dims, n_out]
        for l in range(len(dims) - 1):
            self.params.add(f"w{l}", glorot_uniform(rng, dims[l], dims[l + 1]))
            self.params.add(f"b{l}", np.zeros((1, dims[l + 1])))
        self.n_stages = len(dims) - 1
        self.x_mu = np.zeros(n_in)
        self.x_sd = np.ones(n_in)
        self.y_mu = np.zeros(n_out)
        self.y_sd = np.ones(n_out)

    def _forward_scaled(self, xs: np.ndarray) -> Tensor:
        if xs.shape[1] != self.n_in:
            raise nn.ShapeError(f"fcnn: input width {xs.shape[1]}, expected {self.n_in}")
        h = Tensor(xs)
        for l in range(self.n_stages):
            h = nn.add_bias(nn.matmul(h, self.params[f"w{l}"]), self.params[f"b{l}"])
            if l < self.n_stages - 1:
                h = nn.activation(h, self.spec.activation)
        return h


class GNN(_ScaledModel):
    """Message passing H <- act(A_hat H W) per layer, linear per-node head."""

    def __init__(self, spec: ModelSpec, graph: TopologyGraph, seed: int = 0,
                 n_feat: int = 2, n_out_per_node: int = 2):
        self.spec = spec
        self.graph = graph
        self.n_feat = n_feat
        self.n_out_per_node = n_out_per_node
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        dims = [n_feat, *spec.hidden_dims]
        for l in range(len(dims) - 1):
            self.params.add(f"w{l}", glorot_uniform(rng, dims[l], dims[l + 1]))
        self.params.add("w_head", glorot_uniform(rng, dims[-1], n_out_per_node))
        self.params.add("b_head", np.zeros((1, n_out_per_node)))
        width = n_feat * graph.n
        self.x_mu = np.zeros(width)
        self.x_sd = np.ones(width)
        self.y_mu = np.zeros(n_out_per_node * graph.n)
        self.y_sd = np.ones(n_out_per_node * graph.n)

    def _forward_scaled(self, xs: np.ndarray) -> Tensor:
        n = self.graph.n
        if xs.shape[1] != self.n_feat * n:
            raise nn.ShapeError(f"gnn: input width {xs.shape[1]}, expected {self.n_feat * n}")
        h = Tensor(nn.split_stack(xs, n))
        for l in range(self.spec.n_layers):
            h = nn.activation(nn.matmul(nn.graph_propagate(h, self.graph.a_hat, n),
                                        self.params[f"w{l}"]), self.spec.activation)
        out = nn.add_bias(nn.matmul(h, self.params["w_head"]), self.params["b_head"])
        return nn.unstack_merge(out, n)


def gat_layer(h: Tensor, graph: TopologyGraph, w: Tensor, a_src: Tensor, a_dst: Tensor,
              act: str, att_act: str) -> tuple[Tensor, Tensor]:
    """One attention message-passing layer over stacked node blocks.

    h is (B*N, F) for B independent copies of the same N-node graph. For
    node i over j in neighbors(i) plus i itself: score_ij = a_src . (W h_i)
    + a_dst . (W h_j) (the split form of dotting one attention vector with
    the concatenated pair), gated by the attention activation, normalized by
    a masked row softmax, then h_i <- act(sum_j lambda_ij W h_j).

    Returns (new h, attention rows lambda).
    """
    n = graph.n
    bsz = h.shape[0] // n
    hp = nn.matmul(h, w)
    s = nn.matmul(hp, a_src)
    t = nn.matmul(hp, a_dst)
    scores = nn.pair_scores(s, t, n)
    gated = nn.activation(scores, att_act)
    lam = nn.masked_softmax_rows(gated, np.tile(graph.mask, (bsz, 1)))
    out = nn.activation(nn.block_matmul(lam, hp, n), act)
    return out, lam


class GAT(_ScaledModel):
    """Attention message passing; the self term always participates."""

    def __init__(self, spec: ModelSpec, graph: TopologyGraph, seed: int = 0,
                 n_feat: int = 2, n_out_per_node: int = 2):
        self.spec = spec
        self.graph = graph
        self.n_feat = n_feat
        self.n_out_per_node = n_out_per_node
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        dims = [n_feat, *spec.hidden_dims]
        for l in range(len(dims) - 1):
            self.params.add(f"w{l}", glorot_uniform(rng, dims[l], dims[l + 1]))
            self.params.add(f"a_src{l}", glorot_uniform(rng, dims[l + 1], 1))
            self.params.add(f"a_dst{l}", glorot_uniform(rng, dims[l + 1], 1))
        self.params.add("w_head", glorot_uniform(rng, dims[-1], n_out_per_node))
        self.params.add("b_head", np.zeros((1, n_out_per_node)))
        width = n_feat * graph.n
        self.x_mu = np.zeros(width)
        self.x_sd = np.ones(width)
        self.y_mu = np.zeros(n_out_per_node * graph.n)
        self.y_sd = np.ones(n_out_per_node * graph.n)

    def _layer(self, h: Tensor, l: int) -> tuple[Tensor, Tensor]:
        return gat_layer(h, self.graph, self.params[f"w{l}"], self.params[f"a_src{l}"],
                         self.params[f"a_dst{l}"], self.spec.activation,
                         self.spec.attention_activation)

    def _forward_scaled(self, xs: np.ndarray) -> Tensor:
        n = self.graph.n
        if xs.shape[1] != self.n_feat * n:
            raise nn.ShapeError(f"gat: input width {xs.shape[1]}, expected {self.n_feat * n}")
        h = Tensor(nn.split_stack(xs, n))
        for l in range(self.spec.n_layers):
            h, _ = self._layer(h, l)
        out = nn.add_bias(nn.matmul(h, self.params["w_head"]), self.params["b_head"])
        return nn.unstack_merge(out, n)

    def attention_coefficients(self, x: np.ndarray, layer: int = 0) -> np.ndarray:
        """Materialized (B*N, N) lambda rows for inspection/tests."""
        xs = self._scale_x(np.asarray(x, dtype=float))
        h = Tensor(nn.split_stack(xs, self.graph.n))
        for l in range(layer):
            h, _ = self._layer(h, l)
        _, lam = self._layer(h, layer)
        return lam.data


def build_model(spec: ModelSpec, case: GridCase, seed: int = 0):
    """Instantiate a regressor for a case: 2N inputs, 2N outputs."""
    if spec.kind == FCNN_KIND:
        return FCNN(spec, n_in=2 * case.n_bus, n_out=2 * case.n_bus, seed=seed)
    graph = TopologyGraph.from_case(case)
    if spec.kind == GNN_KIND:
        return GNN(spec, graph, seed=seed)
    return GAT(spec, graph, seed=seed)


def predict_dataset(model, ds) -> tuple[list[float], float]:
    """Evaluate a trained model over a dataset.

    Returns the per-sample MSE list and the dataset-level NRMSE. Constant
    target dimensions (slack angle, setpoint-pinned magnitudes) carry no
    regression signal and are excluded from the NRMSE average.
    """
    preds = model.predict(ds.x)
    if preds.shape != ds.y.shape:
        raise nn.ShapeError(f"prediction shape {preds.shape} != target shape {ds.y.shape}")
    per_sample = np.mean((preds - ds.y) ** 2, axis=1)
    return per_sample.tolist(), nn.nrmse(preds, ds.y, skip_constant=True)


def save_checkpoint(model, cfg, curves, path) -> None:
    """Checkpoint JSON: {model_spec, params, scalers, train_config, final_losses}."""
    payload = {
        "model_spec": asdict(model.spec),
        "params": model.params.to_jsonable(),
        "scalers": model.scaler_state(),
        "train_config": asdict(cfg) if cfg is not None else None,
        "final_losses": {
            "train": curves.train[-1] if curves and curves.train else None,
            "val": min(curves.val) if curves and curves.val else None,
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
        f.write("\n")


def load_checkpoint(path, case: GridCase):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    raw_spec = payload["model_spec"]
    raw_spec["hidden_dims"] = tuple(raw_spec["hidden_dims"])
    spec = ModelSpec(**raw_spec)
    model = build_model(spec, case)
    model.params.load_state_dict({k: np.array(v) for k, v in payload["params"].items()})
    model.load_scaler_state(payload["scalers"])
    return model, payload
