"""Hard-parameter-sharing multi-task networks.

A model is a shared trunk (fully connected layers, each followed by the
trunk activation) plus one small head per task ending in a single linear
output unit. Regression heads output the prediction directly; binary heads
output a logit.

Parameters live in flat float64 vectors described by a layout of named
tensors, concatenated row-major in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numcore import SeededRng

ACTIVATIONS = ("tanh", "relu", "linear")
LOSS_KINDS = ("mse", "bce")


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    trunk_sizes: tuple[int, ...]
    task_kinds: tuple[str, ...]
    head_sizes: tuple[int, ...] = ()
    activation: str = "tanh"
    trunk_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trunk_sizes", tuple(int(s) for s in self.trunk_sizes))
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        object.__setattr__(self, "task_kinds", tuple(self.task_kinds))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.trunk_sizes:
            raise ValueError("at least one trunk layer is required")
        if any(s < 1 for s in self.trunk_sizes + self.head_sizes):
            raise ValueError("layer sizes must be positive")
        if not self.task_kinds:
            raise ValueError("at least one task is required")
        bad = [k for k in self.task_kinds if k not in LOSS_KINDS]
        if bad:
            raise ValueError(f"unknown loss kinds {bad}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_tasks(self) -> int:
        return len(self.task_kinds)

    def trunk_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = self.input_dim
        for l, width in enumerate(self.trunk_sizes):
            shapes.append((f"trunk.{l}.weight", (width, fan_in)))
            if self.trunk_bias:
                shapes.append((f"trunk.{l}.bias", (width,)))
            fan_in = width
        return shapes

    def head_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = self.trunk_sizes[-1]
        for l, width in enumerate(self.head_sizes + (1,)):
            shapes.append((f"head.{l}.weight", (width, fan_in)))
            shapes.append((f"head.{l}.bias", (width,)))
            fan_in = width
        return shapes

    def for_tasks(self, tasks: Sequence[int]) -> "ModelArch":
        """Same trunk and heads, restricted to a subset of the tasks."""
        return ModelArch(
            self.input_dim,
            self.trunk_sizes,
            tuple(self.task_kinds[t] for t in tasks),
            self.head_sizes,
            self.activation,
            self.trunk_bias,
        )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trunk_sizes": list(self.trunk_sizes),
            "task_kinds": list(self.task_kinds),
            "head_sizes": list(self.head_sizes),
            "activation": self.activation,
            "trunk_bias": self.trunk_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(
            int(d["input_dim"]),
            tuple(d["trunk_sizes"]),
            tuple(d["task_kinds"]),
            tuple(d.get("head_sizes", ())),
            d.get("activation", "tanh"),
            bool(d.get("trunk_bias", True)),
        )


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def make_layout(shapes: Iterable[tuple[str, tuple[int, ...]]]) -> tuple[TensorSpec, ...]:
    layout = []
    offset = 0
    for name, shape in shapes:
        spec = TensorSpec(name, tuple(int(s) for s in shape), offset)
        layout.append(spec)
        offset += spec.size
    return tuple(layout)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus the layout of the tensors packed into it."""

    values: np.ndarray
    layout: tuple[TensorSpec, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        expected = 0
        for spec in self.layout:
            if spec.offset != expected:
                raise ValueError(f"layout offsets do not partition the vector at {spec.name}")
            expected += spec.size
        if expected != values.size:
            raise ValueError(f"layout covers {expected} values but vector has {values.size}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_tensors(cls, tensors: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        arrays = [(name, np.asarray(arr, dtype=np.float64)) for name, arr in tensors]
        layout = make_layout((name, arr.shape) for name, arr in arrays)
        flat = np.concatenate([arr.ravel() for _, arr in arrays]) if arrays else np.zeros(0)
        return cls(flat, layout)

    @property
    def size(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return [spec.name for spec in self.layout]

    def tensor(self, name: str) -> np.ndarray:
        for spec in self.layout:
            if spec.name == name:
                return self.values[spec.offset : spec.offset + spec.size].reshape(spec.shape)
        raise KeyError(name)

    def tensors(self) -> list[np.ndarray]:
        return [self.values[s.offset : s.offset + s.size].reshape(s.shape) for s in self.layout]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def to_dict(self) -> dict:
        return {
            "layout": [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in self.layout],
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamVector":
        layout = tuple(TensorSpec(e["name"], tuple(e["shape"]), int(e["offset"])) for e in d["layout"])
        return cls(np.asarray(d["values"], dtype=np.float64), layout)


@dataclass(frozen=True)
class MultiTaskModel:
    arch: ModelArch
    shared: ParamVector
    heads: tuple[ParamVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if len(self.heads) != self.arch.n_tasks:
            raise ValueError(f"{len(self.heads)} heads for {self.arch.n_tasks} tasks")

    @property
    def n_tasks(self) -> int:
        return self.arch.n_tasks

    def with_shared(self, values) -> "MultiTaskModel":
        return MultiTaskModel(self.arch, self.shared.with_values(values), self.heads)

    def with_head(self, t: int, values) -> "MultiTaskModel":
        heads = list(self.heads)
        heads[t] = heads[t].with_values(values)
        return MultiTaskModel(self.arch, self.shared, heads)

    def subset(self, tasks: Sequence[int]) -> "MultiTaskModel":
        return MultiTaskModel(self.arch.for_tasks(tasks), self.shared, [self.heads[t] for t in tasks])


@dataclass(frozen=True)
class MtlSample:
    """One input with a label per task; ``present`` marks available labels."""

    x: np.ndarray
    labels: np.ndarray
    present: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))
        if self.present is None:
            object.__setattr__(self, "present", np.ones(self.labels.shape, dtype=bool))
        else:
            object.__setattr__(self, "present", np.asarray(self.present, dtype=bool))


@dataclass(frozen=True)
class MtlDataset:
    """Row-aligned features and per-task labels."""

    X: np.ndarray
    Y: np.ndarray
    task_names: tuple[str, ...]
    task_kinds: tuple[str, ...]
    present: np.ndarray | None = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError(f"incompatible dataset shapes X{X.shape} Y{Y.shape}")
        if Y.shape[1] != len(self.task_names) or len(self.task_names) != len(self.task_kinds):
            raise ValueError("label columns, task names and task kinds must agree")
        present = np.ones(Y.shape, dtype=bool) if self.present is None else np.asarray(self.present, dtype=bool)
        for t, kind in enumerate(self.task_kinds):
            col = Y[present[:, t], t]
            if kind == "bce" and not np.all((col == 0) | (col == 1)):
                raise ValueError(f"binary task {self.task_names[t]!r} has labels outside {{0, 1}}")
            if kind == "mse" and not np.all(np.isfinite(col)):
                raise ValueError(f"regression task {self.task_names[t]!r} has non-finite labels")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "task_names", tuple(self.task_names))
        object.__setattr__(self, "task_kinds", tuple(self.task_kinds))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def sample(self, i: int) -> MtlSample:
        return MtlSample(self.X[i], self.Y[i], self.present[i])

    def rows(self, idx) -> "MtlDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MtlDataset(self.X[idx], self.Y[idx], self.task_names, self.task_kinds, self.present[idx])

    def tasks(self, tasks: Sequence[int]) -> "MtlDataset":
        tasks = list(tasks)
        return MtlDataset(
            self.X,
            self.Y[:, tasks],
            tuple(self.task_names[t] for t in tasks),
            tuple(self.task_kinds[t] for t in tasks),
            self.present[:, tasks],
        )


def init_shared(arch: ModelArch, rng: SeededRng) -> MultiTaskModel:
    """Draw the initial model.

    Every weight and bias is uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    All task heads start from one common draw, so tasks with identical
    labels produce identical one-step optima.
    """
    gen = rng.make_generator()

    def draw(shapes):
        tensors = []
        fan_in = None
        for name, shape in shapes:
            # weights are (fan_out, fan_in); a bias reuses its layer's fan_in
            if len(shape) == 2:
                fan_in = shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            tensors.append((name, gen.uniform(-bound, bound, size=shape)))
        return tensors

    shared = ParamVector.from_tensors(draw(arch.trunk_shapes()))
    head = ParamVector.from_tensors(draw(arch.head_shapes()))
    return MultiTaskModel(arch, shared, [head] * arch.n_tasks)


def count_parameters(arch: ModelArch) -> tuple[int, int]:
    """(shared count, per-head count) from the layer sizes."""
    shared = 0
    fan_in = arch.input_dim
    for width in arch.trunk_sizes:
        shared += width * fan_in + (width if arch.trunk_bias else 0)
        fan_in = width
    head = 0
    for width in arch.head_sizes + (1,):
        head += width * fan_in + width
        fan_in = width
    return shared, head


# ---------------------------------------------------------------------------
# activations and losses


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_deriv(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    # relu subgradient at 0 is 0
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def _check_bce_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary cross-entropy labels must be 0 or 1")


def task_loss(p, y, kind: str):
    """Per-sample loss: ½(p-y)² for ``mse``; logit cross-entropy for ``bce``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if kind == "mse":
        out = 0.5 * (p - y) ** 2
    elif kind == "bce":
        _check_bce_labels(y)
        # max(p,0) - y*p is exact for y in {0,1}; avoids cancelling softplus(p) - p
        out = np.maximum(p, 0.0) - y * p + np.log1p(np.exp(-np.abs(p)))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def _loss_grad(p, y, kind: str):
    if kind == "mse":
        return p - y
    return sigmoid(p) - y


# ---------------------------------------------------------------------------
# forward / backward


def _weights(pv: ParamVector, prefix: str, n_layers: int, bias: bool):
    tensors = dict(zip(pv.names(), pv.tensors()))
    return [
        (tensors[f"{prefix}.{l}.weight"], tensors[f"{prefix}.{l}.bias"] if bias else None)
        for l in range(n_layers)
    ]


def _dense_forward(layers, X, act: str, act_last: bool):
    """Returns output and the (input, preact, output) cache per layer."""
    cache = []
    h = X
    for l, (W, b) in enumerate(layers):
        a = h @ W.T
        if b is not None:
            a = a + b
        out = _act(act, a) if (act_last or l < len(layers) - 1) else a
        cache.append((h, a, out))
        h = out
    return h, cache


def _dense_backward(layers, cache, d_out, act: str, act_last: bool, per_sample: bool):
    """Backprop ``d_out`` (B, width) through a dense stack.

    Returns the list of flattened gradient pieces in layout order and the
    gradient w.r.t. the stack input. With ``per_sample`` the pieces keep a
    leading batch axis; otherwise they are summed over the batch.
    """
    grads = [None] * len(layers)
    delta = d_out
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        h_in, a, out = cache[l]
        if act_last or l < len(layers) - 1:
            delta = delta * _act_deriv(act, a, out)
        if per_sample:
            gW = np.einsum("bo,bi->boi", delta, h_in).reshape(delta.shape[0], -1)
            gb = delta if b is not None else None
        else:
            gW = (delta.T @ h_in).ravel()
            gb = delta.sum(axis=0) if b is not None else None
        grads[l] = (gW, gb)
        delta = delta @ W
    pieces = []
    for gW, gb in grads:
        pieces.append(gW)
        if gb is not None:
            pieces.append(gb)
    return pieces, delta


def _as_batch(x, input_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != input_dim:
        raise ValueError(f"input has shape {x.shape}, expected last dimension {input_dim}")
    return X, single


def _check_task(model: MultiTaskModel, t: int):
    if not 0 <= t < model.n_tasks:
        raise IndexError(f"task index {t} out of range for {model.n_tasks} tasks")


def _trunk_layers(model: MultiTaskModel):
    return _weights(model.shared, "trunk", len(model.arch.trunk_sizes), model.arch.trunk_bias)


def _head_layers(model: MultiTaskModel, t: int):
    return _weights(model.heads[t], "head", len(model.arch.head_sizes) + 1, True)


def forward(model: MultiTaskModel, t: int, x):
    """Prediction of task ``t`` (logit for binary tasks). ``x`` may be a batch."""
    _check_task(model, t)
    X, single = _as_batch(x, model.arch.input_dim)
    act = model.arch.activation
    h, _ = _dense_forward(_trunk_layers(model), X, act, act_last=True)
    out, _ = _dense_forward(_head_layers(model, t), h, act, act_last=False)
    out = out[:, 0]
    return float(out[0]) if single else out


def task_gradients(model: MultiTaskModel, t: int, X, y, per_sample: bool = False):
    """Loss and gradients of task ``t`` on a batch.

    Returns ``(losses, shared_grad, head_grad)``. Without ``per_sample`` the
    loss and gradients are batch means; with it they carry a leading sample
    axis.
    """
    _check_task(model, t)
    X, _ = _as_batch(X, model.arch.input_dim)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (X.shape[0],):
        raise ValueError("label count does not match batch size")
    kind = model.arch.task_kinds[t]
    act = model.arch.activation
    trunk = _trunk_layers(model)
    head = _head_layers(model, t)
    h, trunk_cache = _dense_forward(trunk, X, act, act_last=True)
    p, head_cache = _dense_forward(head, h, act, act_last=False)
    p = p[:, 0]
    losses = task_loss(p, y, kind)
    scale = 1.0 if per_sample else 1.0 / X.shape[0]
    d_p = (_loss_grad(p, y, kind) * scale)[:, None]
    head_pieces, d_h = _dense_backward(head, head_cache, d_p, act, False, per_sample)
    trunk_pieces, _ = _dense_backward(trunk, trunk_cache, d_h, act, True, per_sample)
    axis = 1 if per_sample else 0
    g_shared = np.concatenate([g.reshape(g.shape[0], -1) if per_sample else g for g in trunk_pieces], axis=axis)
    g_head = np.concatenate([g.reshape(g.shape[0], -1) if per_sample else g for g in head_pieces], axis=axis)
    losses = np.atleast_1d(losses)
    return (losses if per_sample else float(losses.mean())), g_shared, g_head


def multitask_gradients(model: MultiTaskModel, X, Y, tasks: Sequence[int] | None = None, per_sample: bool = False):
    """Loss and gradients of the task-averaged objective.

    The trunk is run forward once and receives the averaged upstream
    gradient of all task heads in a single backward pass. Head gradients
    carry the 1/T factor of the averaged objective.
    """
    tasks = list(range(model.n_tasks)) if tasks is None else list(tasks)
    X, _ = _as_batch(X, model.arch.input_dim)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.shape != (X.shape[0], len(tasks)):
        raise ValueError(f"labels have shape {Y.shape}, expected {(X.shape[0], len(tasks))}")
    act = model.arch.activation
    trunk = _trunk_layers(model)
    h, trunk_cache = _dense_forward(trunk, X, act, act_last=True)
    T = len(tasks)
    scale = (1.0 if per_sample else 1.0 / X.shape[0]) / T
    d_h = np.zeros_like(h)
    total = np.zeros(X.shape[0])
    head_grads = []
    for col, t in enumerate(tasks):
        _check_task(model, t)
        kind = model.arch.task_kinds[t]
        head = _head_layers(model, t)
        p, head_cache = _dense_forward(head, h, act, act_last=False)
        p = p[:, 0]
        total = total + np.atleast_1d(task_loss(p, Y[:, col], kind))
        d_p = (_loss_grad(p, Y[:, col], kind) * scale)[:, None]
        pieces, d_h_t = _dense_backward(head, head_cache, d_p, act, False, per_sample)
        d_h = d_h + d_h_t
        axis = 1 if per_sample else 0
        head_grads.append(np.concatenate([g.reshape(g.shape[0], -1) if per_sample else g for g in pieces], axis=axis))
    trunk_pieces, _ = _dense_backward(trunk, trunk_cache, d_h, act, True, per_sample)
    axis = 1 if per_sample else 0
    g_shared = np.concatenate([g.reshape(g.shape[0], -1) if per_sample else g for g in trunk_pieces], axis=axis)
    losses = total / T
    return (losses if per_sample else float(losses.mean())), g_shared, head_grads


def shared_grad(model: MultiTaskModel, t: int, sample: MtlSample) -> np.ndarray:
    """Gradient of task ``t``'s loss on one sample w.r.t. the shared trunk."""
    if not sample.present[t]:
        raise ValueError(f"sample has no label for task {t}")
    _, g, _ = task_gradients(model, t, sample.x, [sample.labels[t]])
    return g


def head_grad(model: MultiTaskModel, t: int, sample: MtlSample) -> np.ndarray:
    if not sample.present[t]:
        raise ValueError(f"sample has no label for task {t}")
    _, _, g = task_gradients(model, t, sample.x, [sample.labels[t]])
    return g


def average_multitask_loss(model: MultiTaskModel, sample: MtlSample) -> float:
    """Mean over tasks of the per-task loss on one sample."""
    if sample.labels.shape != (model.n_tasks,):
        raise ValueError(f"expected {model.n_tasks} labels, got {sample.labels.shape}")
    if not np.all(sample.present):
        missing = np.flatnonzero(~sample.present).tolist()
        raise ValueError(f"missing labels for tasks {missing}")
    losses = [task_loss(forward(model, t, sample.x), sample.labels[t], model.arch.task_kinds[t]) for t in range(model.n_tasks)]
    return float(np.mean(losses))


def flatten(model: MultiTaskModel) -> ParamVector:
    """Shared tensors followed by each head's tensors, all in one vector."""
    tensors = list(zip(model.shared.names(), model.shared.tensors()))
    for t, head in enumerate(model.heads):
        tensors += [(f"task{t}.{name}", arr) for name, arr in zip(head.names(), head.tensors())]
    return ParamVector.from_tensors(tensors)


def unflatten(flat: ParamVector, arch: ModelArch) -> MultiTaskModel:
    expected = make_layout(
        list(arch.trunk_shapes())
        + [(f"task{t}.{name}", shape) for t in range(arch.n_tasks) for name, shape in arch.head_shapes()]
    )
    if flat.layout != expected:
        raise ValueError("flat vector layout does not match the architecture")
    n_shared, n_head = count_parameters(arch)
    v = flat.values
    shared = ParamVector(v[:n_shared].copy(), make_layout(arch.trunk_shapes()))
    head_layout = make_layout(arch.head_shapes())
    heads = [
        ParamVector(v[n_shared + t * n_head : n_shared + (t + 1) * n_head].copy(), head_layout)
        for t in range(arch.n_tasks)
    ]
    return MultiTaskModel(arch, shared, heads)


def model_to_dict(model: MultiTaskModel) -> dict:
    return {"arch": model.arch.to_dict(), "params": flatten(model).to_dict()}


def model_from_dict(d: dict) -> MultiTaskModel:
    arch = ModelArch.from_dict(d["arch"])
    return unflatten(ParamVector.from_dict(d["params"]), arch)
