"""Task graph and a two-layer graph attention network trained to
reconstruct its own node features.

Nodes are tasks, node features are rows of the normalised affinity
matrix, and every node attends to every node (self included). Layer 1 has
several heads whose ELU outputs are concatenated into the embeddings Z;
layer 2 is a single linear-output head mapping Z back to the features.
Gradients are derived by hand and checked against finite differences in
the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import OptimizerState, SeededRng, optimizer_step

DEFAULT_SLOPE = 0.2


@dataclass(frozen=True)
class TaskGraph:
    features: np.ndarray
    weights: np.ndarray
    task_names: tuple[str, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def neighbours(self, i: int) -> list[int]:
        # complete graph with self-loops
        return list(range(self.n_nodes))


def build_graph(A, task_names=None) -> TaskGraph:
    """Graph over tasks from a normalised affinity matrix.

    Accepts an :class:`~scagroup.sca.AffinityMatrix` or a plain square
    array. Edge weights are the symmetrised affinities; node features are
    the unsymmetrised rows.
    """
    if hasattr(A, "normalized"):
        task_names = task_names or A.task_names
        A = A.normalized
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"affinity matrix must be square, got {A.shape}")
    names = tuple(task_names) if task_names else tuple(f"task{i}" for i in range(A.shape[0]))
    return TaskGraph(A.copy(), 0.5 * (A + A.T), names)


@dataclass
class GatLayer:
    """Multi-head attention layer.

    ``W`` has shape (heads, units, in_dim) and ``attn`` (heads, 2 * units);
    the first half of each attention vector scores the receiving node, the
    second half the sender.
    """

    W: np.ndarray
    attn: np.ndarray
    activation: str = "elu"
    concat: bool = True
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.W.ndim != 3 or self.attn.shape != (self.W.shape[0], 2 * self.W.shape[1]):
            raise ValueError("attention vector length must be twice the per-head units")

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def units(self) -> int:
        return self.W.shape[1]


def _leaky(s, slope):
    return np.where(s > 0, s, slope * s)


def _softmax_rows(e):
    e = e - e.max(axis=-1, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=-1, keepdims=True)


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _check_input(layer: GatLayer, H_in):
    H_in = np.asarray(H_in, dtype=np.float64)
    if H_in.ndim != 2 or H_in.shape[1] != layer.W.shape[2]:
        raise ValueError(f"layer expects inputs with {layer.W.shape[2]} columns, got {H_in.shape}")
    return H_in


def _attention(layer: GatLayer, Zh):
    """Zh: (heads, T, units). Returns scores s, coefficients alpha."""
    F = layer.units
    src = np.einsum("htf,hf->ht", Zh, layer.attn[:, :F])
    dst = np.einsum("htf,hf->ht", Zh, layer.attn[:, F:])
    s = src[:, :, None] + dst[:, None, :]
    return s, _softmax_rows(_leaky(s, layer.slope))


def attention_coefficients(layer: GatLayer, H_in, graph: TaskGraph | None = None) -> np.ndarray:
    """Attention weights, shape (heads, T, T); each row sums to one."""
    H_in = _check_input(layer, H_in)
    if graph is not None and graph.n_nodes != H_in.shape[0]:
        raise ValueError("input rows do not match graph size")
    Zh = np.einsum("hoi,ti->hto", layer.W, H_in)
    return _attention(layer, Zh)[1]


def _layer_forward(layer: GatLayer, H_in):
    Zh = np.einsum("hoi,ti->hto", layer.W, H_in)
    s, alpha = _attention(layer, Zh)
    agg = np.einsum("hij,hjf->hif", alpha, Zh)
    out = _elu(agg) if layer.activation == "elu" else agg
    cache = (H_in, Zh, s, alpha, agg)
    if layer.concat:
        merged = np.concatenate(list(out), axis=1)
    else:
        merged = out.mean(axis=0)
    return merged, cache


def gat_layer_forward(layer: GatLayer, H_in, graph: TaskGraph | None = None) -> np.ndarray:
    H_in = _check_input(layer, H_in)
    if graph is not None and graph.n_nodes != H_in.shape[0]:
        raise ValueError("input rows do not match graph size")
    return _layer_forward(layer, H_in)[0]


def _layer_backward(layer: GatLayer, cache, d_out):
    H_in, Zh, s, alpha, agg = cache
    heads, T, F = Zh.shape
    if layer.concat:
        d_heads = d_out.reshape(T, heads, F).transpose(1, 0, 2)
    else:
        d_heads = np.broadcast_to(d_out / heads, (heads, T, F))
    if layer.activation == "elu":
        d_agg = d_heads * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0.0)))
    else:
        d_agg = d_heads
    d_Z = np.einsum("hij,hif->hjf", alpha, d_agg)
    d_alpha = np.einsum("hif,hjf->hij", d_agg, Zh)
    d_e = alpha * (d_alpha - (alpha * d_alpha).sum(axis=-1, keepdims=True))
    d_s = d_e * np.where(s > 0, 1.0, layer.slope)
    row = d_s.sum(axis=2)
    col = d_s.sum(axis=1)
    d_attn = np.concatenate(
        [np.einsum("ht,htf->hf", row, Zh), np.einsum("ht,htf->hf", col, Zh)], axis=1
    )
    d_Z = d_Z + row[:, :, None] * layer.attn[:, None, :F] + col[:, :, None] * layer.attn[:, None, F:]
    d_W = np.einsum("hto,ti->hoi", d_Z, H_in)
    d_H = np.einsum("hto,hoi->ti", d_Z, layer.W)
    return d_W, d_attn, d_H


@dataclass(frozen=True)
class GatConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    heads: int = 2
    slope: float = DEFAULT_SLOPE
    optimizer: str = "adam"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "heads": self.heads,
            "slope": self.slope,
            "optimizer": self.optimizer,
            "seed": self.seed,
        }


@dataclass
class GatModel:
    hidden: GatLayer
    output: GatLayer

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.hidden.W.ravel(), self.hidden.attn.ravel(), self.output.W.ravel(), self.output.attn.ravel()])

    def set_parameters(self, flat) -> None:
        pieces = []
        offset = 0
        for arr in (self.hidden.W, self.hidden.attn, self.output.W, self.output.attn):
            pieces.append(np.asarray(flat[offset : offset + arr.size]).reshape(arr.shape))
            offset += arr.size
        self.hidden.W, self.hidden.attn, self.output.W, self.output.attn = pieces

    def embed(self, F) -> np.ndarray:
        return _layer_forward(self.hidden, np.asarray(F, dtype=np.float64))[0]

    def reconstruct(self, F) -> np.ndarray:
        return _layer_forward(self.output, self.embed(F))[0]


def _glorot(gen, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=shape)


def init_gat(T: int, heads: int = 2, slope: float = DEFAULT_SLOPE, rng: SeededRng | None = None) -> GatModel:
    """Layer 1: ``heads`` heads of T units (ELU, concatenated, Z is T x heads*T).
    Layer 2: one head of T units with identity output. Glorot-uniform init."""
    gen = (rng or SeededRng(0)).make_generator()
    z_dim = heads * T
    hidden = GatLayer(
        _glorot(gen, (heads, T, T), T, T),
        _glorot(gen, (heads, 2 * T), 2 * T, 1),
        "elu",
        True,
        slope,
    )
    output = GatLayer(
        _glorot(gen, (1, T, z_dim), z_dim, T),
        _glorot(gen, (1, 2 * T), 2 * T, 1),
        "identity",
        False,
        slope,
    )
    return GatModel(hidden, output)


def reconstruction_loss_and_grad(model: GatModel, F) -> tuple[float, np.ndarray]:
    """Mean squared reconstruction error and its gradient w.r.t. all parameters."""
    F = np.asarray(F, dtype=np.float64)
    Z, c1 = _layer_forward(model.hidden, F)
    Fp, c2 = _layer_forward(model.output, Z)
    diff = Fp - F
    loss = float(np.mean(diff * diff))
    d_Fp = 2.0 * diff / diff.size
    dW2, da2, dZ = _layer_backward(model.output, c2, d_Fp)
    dW1, da1, _ = _layer_backward(model.hidden, c1, dZ)
    return loss, np.concatenate([dW1.ravel(), da1.ravel(), dW2.ravel(), da2.ravel()])


def reconstruction_loss(model: GatModel, F) -> float:
    F = np.asarray(F, dtype=np.float64)
    diff = model.reconstruct(F) - F
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class NodeEmbeddings:
    Z: np.ndarray
    losses: tuple[float, ...] = ()
    epochs: int = 0
    task_names: tuple[str, ...] = field(default=())

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train_gat(graph: TaskGraph, config: GatConfig = GatConfig(), rng: SeededRng | None = None, return_model: bool = False):
    """Full-graph training: one optimizer step per epoch on the reconstruction MSE.

    ``losses`` holds the loss before training followed by the loss after
    each epoch.
    """
    T = graph.n_nodes
    if T < 2:
        raise ValueError("GAT training needs at least two tasks")
    rng = rng or SeededRng(config.seed)
    model = init_gat(T, config.heads, config.slope, rng)
    F = graph.features
    params = model.parameters()
    if config.optimizer == "adam":
        state = OptimizerState.adam(params.size, config.learning_rate)
    else:
        state = OptimizerState.sgd(config.learning_rate)
    loss, grad = reconstruction_loss_and_grad(model, F)
    losses = [loss]
    for epoch in range(config.epochs):
        state, params = optimizer_step(state, params, grad)
        model.set_parameters(params)
        loss, grad = reconstruction_loss_and_grad(model, F)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite reconstruction loss at epoch {epoch}")
        losses.append(loss)
    emb = NodeEmbeddings(model.embed(F), tuple(losses), config.epochs, graph.task_names)
    return (emb, model) if return_model else emb
