"""Training and scoring of task groupings.

Each group gets its own hard-sharing model, trained either on the
group-averaged loss (``mtl``) or with the Reptile scheme where every task
adapts a copy of the trunk together with its own head and the trunk then
moves toward the mean adapted copy (``reptile``). A grouping's collective
performance is the mean over tasks of the best validation-selected model's
test metric. Random and exhaustive baselines are included.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .numcore import OptimizerState, SeededRng, derive_seed, optimizer_step
from .taskmodels import (
    ModelArch,
    MtlDataset,
    MultiTaskModel,
    forward,
    init_shared,
    multitask_gradients,
    sigmoid,
    task_gradients,
    task_loss,
)

log = logging.getLogger(__name__)

ORACLE_MAX_TASKS = 8
THREADS_ENV = "SCAGROUP_THREADS"


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"training diverged ({what} became non-finite) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mtl"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    inner_iterations: int = 25
    inner_lr: float = 0.1
    outer_lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mtl", "reptile"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("epochs", "batch_size", "inner_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("learning_rate", "inner_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.outer_lr < 0:
            raise ValueError("outer_lr must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _group_data(group: Sequence[int], dataset: MtlDataset) -> MtlDataset:
    group = list(group)
    if not group:
        raise ValueError("group must contain at least one task")
    sub = dataset.tasks(group)
    if not np.all(sub.present):
        raise ValueError(f"missing labels for tasks in group {group}")
    return sub


def _group_model(group: Sequence[int], arch: ModelArch, seed: int) -> MultiTaskModel:
    return init_shared(arch.for_tasks(group), SeededRng(seed, 0))


def average_loss(model: MultiTaskModel, data: MtlDataset) -> float:
    """Mean over tasks and samples of the per-sample loss."""
    losses = [
        np.mean(task_loss(forward(model, t, data.X), data.Y[:, t], model.arch.task_kinds[t]))
        for t in range(model.n_tasks)
    ]
    return float(np.mean(losses))


def train_group_mtl(
    group: Sequence[int],
    dataset: MtlDataset,
    arch: ModelArch,
    config: TrainConfig,
    model: MultiTaskModel | None = None,
    on_step: Callable | None = None,
) -> tuple[MultiTaskModel, list[float]]:
    """Minibatch training on the group-averaged loss.

    ``arch`` describes all tasks; the group's model keeps only its own
    heads. Returns the model and the training loss before training and
    after each epoch. ``on_step(model, batch, shared_grad)`` is called
    before every update.
    """
    data = _group_data(group, dataset)
    if model is None:
        model = _group_model(group, arch, config.seed)
    gen = SeededRng(config.seed, 1).make_generator()
    n_shared = model.shared.size
    n_head = model.heads[0].size
    T = model.n_tasks

    def make_state(n):
        return OptimizerState.adam(n, config.learning_rate) if config.optimizer == "adam" else OptimizerState.sgd(config.learning_rate)

    state = make_state(n_shared + T * n_head)
    params = np.concatenate([model.shared.values] + [h.values for h in model.heads])
    curve = [average_loss(model, data)]
    for epoch in range(config.epochs):
        perm = gen.permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            idx = perm[start : start + config.batch_size]
            _, g_shared, g_heads = multitask_gradients(model, data.X[idx], data.Y[idx])
            if on_step is not None:
                on_step(model, idx, g_shared)
            grads = np.concatenate([g_shared] + g_heads)
            state, params = optimizer_step(state, params, grads)
            model = MultiTaskModel(
                model.arch,
                model.shared.with_values(params[:n_shared]),
                [h.with_values(params[n_shared + t * n_head : n_shared + (t + 1) * n_head]) for t, h in enumerate(model.heads)],
            )
        loss = average_loss(model, data)
        if not np.isfinite(loss):
            raise DivergenceError(epoch)
        curve.append(loss)
    return model, curve


@dataclass
class ReptileStep:
    theta_old: np.ndarray
    workers: list[np.ndarray]
    meta_grad: np.ndarray
    theta_new: np.ndarray


def train_group_reptile(
    group: Sequence[int],
    dataset: MtlDataset,
    arch: ModelArch,
    config: TrainConfig,
    validation: MtlDataset | None = None,
    model: MultiTaskModel | None = None,
    on_meta_step: Callable[[ReptileStep], None] | None = None,
) -> tuple[MultiTaskModel, list[float]]:
    """Reptile over the group's tasks with task-specific heads.

    Per meta-iteration (``config.epochs`` of them), each task copies the
    trunk, then runs ``inner_iterations`` SGD steps with rate ``inner_lr``
    on sampled batches, updating the copy and its own head; head updates
    persist. The trunk then moves by ``outer_lr`` times the mean of
    (trunk - copy). The curve holds the average loss on ``validation``
    (training data if omitted) before training and after each
    meta-iteration.
    """
    data = _group_data(group, dataset)
    val = _group_data(group, validation) if validation is not None else data
    if model is None:
        model = _group_model(group, arch, config.seed)
    gen = SeededRng(config.seed, 2).make_generator()
    T = model.n_tasks
    beta, alpha = config.inner_lr, config.outer_lr
    theta = model.shared.values.copy()
    heads = [h.values.copy() for h in model.heads]
    curve = [average_loss(model, val)]
    n = len(data)
    for it in range(config.epochs):
        workers = []
        for t in range(T):
            W = theta.copy()
            for _ in range(config.inner_iterations):
                idx = gen.choice(n, size=min(config.batch_size, n), replace=False)
                m_t = MultiTaskModel(model.arch, model.shared.with_values(W), [model.heads[k].with_values(heads[k]) for k in range(T)])
                _, gW, gphi = task_gradients(m_t, t, data.X[idx], data.Y[idx, t])
                W = W - beta * gW
                heads[t] = heads[t] - beta * gphi
            workers.append(W)
        G = np.zeros_like(theta)
        for W in workers:
            G = G + (theta - W)
        G = G / T
        theta_new = theta - alpha * G
        if on_meta_step is not None:
            on_meta_step(ReptileStep(theta, workers, G, theta_new))
        theta = theta_new
        model = MultiTaskModel(model.arch, model.shared.with_values(theta), [model.heads[k].with_values(heads[k]) for k in range(T)])
        loss = average_loss(model, val)
        if not np.isfinite(loss):
            raise DivergenceError(it)
        curve.append(loss)
    return model, curve


# ---------------------------------------------------------------------------
# metrics and grouping evaluation


def balanced_accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    rates = [np.mean(y_pred[y_true == c] == c) for c in (True, False) if np.any(y_true == c)]
    return float(np.mean(rates))


def task_metric(model: MultiTaskModel, t: int, X, y) -> float:
    """Negative MSE for regression heads, balanced accuracy for binary heads."""
    p = forward(model, t, X)
    if model.arch.task_kinds[t] == "bce":
        return balanced_accuracy(y, sigmoid(p) >= 0.5)
    return -float(np.mean((p - np.asarray(y)) ** 2))


@dataclass
class GroupPerformanceReport:
    groups: list[list[int]]
    per_task: list[float]
    validation: list[float]
    chosen_group: list[int]
    curves: dict[str, list[float]]
    collective: float
    timings: dict[str, float] = field(default_factory=dict)
    task_names: tuple[str, ...] = ()

    def to_dict(self, include_timings: bool = True) -> dict:
        names = self.task_names or tuple(f"task{i}" for i in range(len(self.per_task)))
        d = {
            "groups": [[names[i] for i in g] for g in self.groups],
            "group_indices": [list(map(int, g)) for g in self.groups],
            "per_task": {names[i]: v for i, v in enumerate(self.per_task)},
            "validation": {names[i]: v for i, v in enumerate(self.validation)},
            "chosen_group": {names[i]: int(g) for i, g in enumerate(self.chosen_group)},
            "collective": self.collective,
            "curves": self.curves,
        }
        if include_timings:
            d["timings"] = self.timings
        return d


def group_key(group: Sequence[int]) -> str:
    return "+".join(str(t) for t in sorted(group))


def group_seed(base_seed: int, group: Sequence[int]) -> int:
    return derive_seed(base_seed, "train", group_key(group))


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def train_group(group, train, arch, config, validation=None):
    cfg = TrainConfig(**{**config.to_dict(), "seed": group_seed(config.seed, group)})
    if config.mode == "reptile":
        return train_group_reptile(group, train, arch, cfg, validation)
    return train_group_mtl(group, train, arch, cfg)


def evaluate_groupings(
    groupings: Sequence[Sequence[int]],
    train: MtlDataset,
    validation: MtlDataset,
    test: MtlDataset,
    arch: ModelArch,
    config: TrainConfig,
    cache: dict | None = None,
) -> GroupPerformanceReport:
    """Train one model per group and score every task with its best model.

    A task covered by several groups uses the model with the best
    validation metric (first group on ties). Models are keyed by the sorted
    task tuple, so ``cache`` can share them across groupings.
    """
    T = train.n_tasks
    groups = [sorted(set(int(t) for t in g)) for g in groupings]
    covered = set().union(*groups) if groups else set()
    missing = sorted(set(range(T)) - covered)
    if missing:
        raise ValueError(f"tasks {missing} are not covered by any group")
    cache = {} if cache is None else cache
    todo = [g for g in dict.fromkeys(tuple(g) for g in groups) if (g, config) not in cache]
    t0 = time.perf_counter()

    def fit(g):
        return train_group(list(g), train, arch, config, validation)

    workers = min(thread_count(), max(1, len(todo)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fitted = list(pool.map(fit, todo))
    else:
        fitted = [fit(g) for g in todo]
    for g, res in zip(todo, fitted):
        cache[(g, config)] = res
    train_time = time.perf_counter() - t0

    best_val = [-np.inf] * T
    best_test = [np.nan] * T
    chosen = [-1] * T
    curves = {}
    for gi, g in enumerate(groups):
        model, curve = cache[(tuple(g), config)]
        curves[group_key(g)] = list(curve)
        for local, t in enumerate(g):
            v = task_metric(model, local, validation.X, validation.Y[:, t])
            if v > best_val[t]:
                best_val[t] = v
                best_test[t] = task_metric(model, local, test.X, test.Y[:, t])
                chosen[t] = gi
    collective = float(np.mean(best_test))
    return GroupPerformanceReport(
        groups, best_test, best_val, chosen, curves, collective, {"train": train_time}, train.task_names
    )


# ---------------------------------------------------------------------------
# baselines


def random_groupings(T: int, b: int, rng: SeededRng) -> list[list[int]]:
    """Uniform assignment of T tasks to b groups, redrawn until none is empty.

    With b == T every group is a singleton; callers that forbid singletons
    must reject that budget themselves.
    """
    if b < 2:
        raise ValueError("budget must be at least 2")
    if b > T:
        raise ValueError(f"budget {b} exceeds task count {T}")
    gen = rng.make_generator()
    while True:
        labels = gen.integers(0, b, size=T)
        if np.unique(labels).size == b:
            return [np.flatnonzero(labels == k).tolist() for k in range(b)]


def set_partitions(items: Sequence, max_parts: int | None = None) -> Iterator[list[list]]:
    """All partitions of ``items`` into at most ``max_parts`` non-empty blocks.

    Generated from restricted growth strings, so blocks are ordered by
    their first element and each partition appears once.
    """
    items = list(items)
    n = len(items)
    if n == 0:
        yield []
        return
    limit = n if max_parts is None else max_parts
    if limit < 1:
        return

    def grow(prefix, n_blocks):
        if len(prefix) == n:
            blocks = [[] for _ in range(n_blocks)]
            for item, b in zip(items, prefix):
                blocks[b].append(item)
            yield blocks
            return
        for b in range(min(n_blocks + 1, limit)):
            yield from grow(prefix + [b], max(n_blocks, b + 1))

    yield from grow([0], 1)


def stirling2(n: int, k: int) -> int:
    """Stirling number of the second kind via the standard recurrence."""
    if n == k:
        return 1
    if k == 0 or k > n:
        return 0
    row = [1] + [0] * k
    for i in range(1, n + 1):
        for j in range(min(i, k), 0, -1):
            row[j] = j * row[j] + row[j - 1]
        row[0] = 0
    return row[k]


@dataclass
class OracleResult:
    best: list[list[int]]
    best_score: float
    table: list[tuple[list[list[int]], float]]
    reports: list[GroupPerformanceReport]


def exhaustive_oracle(
    tasks: Sequence[int],
    b: int,
    train: MtlDataset,
    validation: MtlDataset,
    test: MtlDataset,
    arch: ModelArch,
    config: TrainConfig,
    cache: dict | None = None,
) -> OracleResult:
    """Score every partition of ``tasks`` into at most ``b`` groups.

    Returns the best partition (first in enumeration order on ties) and the
    full table. Refuses more than eight tasks.
    """
    tasks = list(tasks)
    if len(tasks) > ORACLE_MAX_TASKS:
        raise ValueError(f"exhaustive oracle is limited to {ORACLE_MAX_TASKS} tasks, got {len(tasks)}")
    if b < 1:
        raise ValueError("budget must be at least 1")
    cache = {} if cache is None else cache
    table = []
    reports = []
    for part in set_partitions(tasks, b):
        rep = evaluate_groupings(part, train, validation, test, arch, config, cache)
        table.append((part, rep.collective))
        reports.append(rep)
    best_i = max(range(len(table)), key=lambda i: (table[i][1], -i))
    return OracleResult(table[best_i][0], table[best_i][1], table, reports)
