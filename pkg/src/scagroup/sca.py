"""Sample-wise convergence-based affinity (SCA).

Each (sample, task) pair gets a one-step "optimum" of the shared trunk,
theta0 - eta * grad_theta loss_t(sample). Tasks whose optima sit close to
each other across samples are affine. The module also provides the
density and loss-bound diagnostics that motivate the score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import SeededRng, l1_distance
from .taskmodels import (
    MtlDataset,
    MtlSample,
    MultiTaskModel,
    ParamVector,
    average_multitask_loss,
    multitask_gradients,
    task_gradients,
    task_loss,
    forward,
)

DEFAULT_ETA = 0.01
DEFAULT_N_SAMPLES = 100
MODES = ("vector", "tensorwise", "meta")


def _check_finite(g: np.ndarray, what: str):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient for {what}")


def _check_eta(eta: float):
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")


def task_sample_optimum(model: MultiTaskModel, t: int, sample: MtlSample, eta: float = DEFAULT_ETA) -> ParamVector:
    """One SGD step on the shared trunk under task ``t``'s loss; heads fixed."""
    _check_eta(eta)
    if not sample.present[t]:
        raise ValueError(f"sample has no label for task {t}")
    _, g, _ = task_gradients(model, t, sample.x, [sample.labels[t]])
    _check_finite(g, f"task {t}")
    return model.shared.with_values(model.shared.values - eta * g)


def shared_sample_optimum(model: MultiTaskModel, sample: MtlSample, eta: float = DEFAULT_ETA) -> ParamVector:
    """One SGD step on the shared trunk under the task-averaged loss."""
    _check_eta(eta)
    if not np.all(sample.present):
        raise ValueError("shared optimum needs every task label")
    _, g, _ = multitask_gradients(model, sample.x, sample.labels)
    _check_finite(g, "averaged loss")
    return model.shared.with_values(model.shared.values - eta * g)


def _pair_l1_sum(vectors: np.ndarray) -> float:
    # sum over ordered pairs, self-pairs included (they add zero)
    total = 0.0
    for j in range(vectors.shape[0]):
        total += float(np.abs(vectors - vectors[j]).sum())
    return total


def _stack(optima: Sequence[ParamVector]) -> np.ndarray:
    if len(optima) < 1:
        raise ValueError("need at least one optimum")
    first = optima[0]
    for o in optima[1:]:
        if not o.same_layout(first):
            raise ValueError("optima have different layouts")
    return np.stack([o.values for o in optima])


def optima_density(optima: Sequence[ParamVector], H: float) -> float:
    """sqrt(H)/T² times the summed pairwise L1 distance of T optima."""
    if not H > 0:
        raise ValueError("smoothness bound must be positive")
    V = _stack(optima)
    return float(np.sqrt(H) / V.shape[0] ** 2 * _pair_l1_sum(V))


def dataset_density(shared_optima: Sequence[ParamVector], H: float) -> float:
    """Same density, taken over the per-sample shared optima."""
    return optima_density(shared_optima, H)


@dataclass(frozen=True)
class SmoothnessEstimate:
    H: float
    max_observed: float
    method: str
    safety_factor: float = 1.0


def estimate_smoothness(
    model: MultiTaskModel,
    samples: Sequence[MtlSample],
    probes: int = 8,
    safety_factor: float = 1.0,
    h: float = 1e-4,
) -> SmoothnessEstimate:
    """Bound the diagonal Hessian of every task loss w.r.t. the trunk.

    Each diagonal entry is the central difference of the analytic gradient
    along its own coordinate, probed at theta0 for the first ``probes``
    samples and every labelled task.
    """
    if probes < 1:
        raise ValueError("probes must be at least 1")
    if safety_factor < 1:
        raise ValueError("safety factor must be >= 1")
    theta0 = model.shared.values
    M = theta0.size
    max_diag = -np.inf
    for sample in list(samples)[:probes]:
        for t in range(model.n_tasks):
            if not sample.present[t]:
                continue
            y = [sample.labels[t]]
            for k in range(M):
                plus = theta0.copy()
                plus[k] += h
                minus = theta0.copy()
                minus[k] -= h
                _, gp, _ = task_gradients(model.with_shared(plus), t, sample.x, y)
                _, gm, _ = task_gradients(model.with_shared(minus), t, sample.x, y)
                d = (gp[k] - gm[k]) / (2.0 * h)
                if not np.isfinite(d):
                    raise FloatingPointError(f"non-finite curvature probe at coordinate {k}, task {t}")
                max_diag = max(max_diag, d)
    if not np.isfinite(max_diag):
        raise ValueError("no labelled (sample, task) pairs to probe")
    # H must be positive for the density scaling
    H = max(max_diag, np.finfo(float).tiny) * safety_factor
    return SmoothnessEstimate(float(H), float(max_diag), "central difference of analytic gradient", safety_factor)


@dataclass(frozen=True)
class LossBound:
    J: float
    psi: float
    bound: float
    holds: bool
    slack: float


def check_loss_bound(model: MultiTaskModel, sample: MtlSample, eta: float, H: float) -> LossBound:
    """Average loss at the shared one-step optimum against T³ψ².

    Violations are reported through ``holds``; the inequality only follows
    when each task-specific step reaches zero loss.
    """
    T = model.n_tasks
    optima = [task_sample_optimum(model, t, sample, eta) for t in range(T)]
    theta_star = shared_sample_optimum(model, sample, eta)
    J = average_multitask_loss(model.with_shared(theta_star.values), sample)
    psi = optima_density(optima, H)
    bound = T**3 * psi**2
    return LossBound(J, psi, bound, bool(J <= bound + 1e-9), bound - J)


@dataclass(frozen=True)
class AggregateBound:
    J: float
    task_term: float
    sample_term: float
    bound: float
    holds: bool


def aggregate_loss_bound(model: MultiTaskModel, samples: Sequence[MtlSample], eta: float, H: float) -> AggregateBound:
    """Dataset-level diagnostic: J <= T³/(2n) Σ ψ_i² + n³/2 Ψ², at face value."""
    T = model.n_tasks
    n = len(samples)
    psis = []
    shared = []
    Js = []
    for s in samples:
        optima = [task_sample_optimum(model, t, s, eta) for t in range(T)]
        psis.append(optima_density(optima, H))
        theta_star = shared_sample_optimum(model, s, eta)
        shared.append(theta_star)
        Js.append(average_multitask_loss(model.with_shared(theta_star.values), s))
    Psi = dataset_density(shared, H)
    task_term = T**3 / (2 * n) * float(np.sum(np.square(psis)))
    sample_term = n**3 / 2 * Psi**2
    J = float(np.mean(Js))
    bound = task_term + sample_term
    return AggregateBound(J, task_term, sample_term, bound, bool(J <= bound + 1e-9))


# ---------------------------------------------------------------------------
# affinity


@dataclass(frozen=True)
class SampleOptimaSet:
    """Task-specific one-step optima for n samples.

    ``task_optima`` has shape (n, T, M); ``shared_optima`` (n, M) is the
    per-sample mean over tasks.
    """

    theta0: ParamVector
    eta: float
    task_optima: np.ndarray
    shared_optima: np.ndarray

    @property
    def n(self) -> int:
        return self.task_optima.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.task_optima.shape[1]

    def optimum(self, i: int, t: int) -> ParamVector:
        return self.theta0.with_values(self.task_optima[i, t])


def _per_sample_shared_grads(model: MultiTaskModel, t: int, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    _, g, _ = task_gradients(model, t, X, y, per_sample=True)
    _check_finite(g, f"task {t}")
    return g


def compute_sample_optima(model: MultiTaskModel, samples: MtlDataset, eta: float = DEFAULT_ETA) -> SampleOptimaSet:
    """Vectorised task_sample_optimum over every (sample, task) pair."""
    _check_eta(eta)
    if not np.all(samples.present):
        raise ValueError("every sample needs every task label")
    theta0 = model.shared.values
    n, T = len(samples), model.n_tasks
    optima = np.empty((n, T, theta0.size))
    for t in range(T):
        optima[:, t, :] = theta0 - eta * _per_sample_shared_grads(model, t, samples.X, samples.Y[:, t])
    return SampleOptimaSet(model.shared, eta, optima, optima.mean(axis=1))


def pairwise_affinity(task_i: int, task_j: int, optima: SampleOptimaSet) -> float:
    """Mean over samples of the L1 distance between two tasks' optima."""
    n = optima.n
    total = 0.0
    for i in range(n):
        total += l1_distance(optima.task_optima[i, task_i], optima.task_optima[i, task_j])
    return total / n


def pairwise_affinity_tensorwise(task_i: int, task_j: int, optima: SampleOptimaSet) -> float:
    """Per-tensor L1 distances averaged over tensors and samples."""
    layout = optima.theta0.layout
    n, l = optima.n, len(layout)
    if l == 0:
        raise ValueError("empty layout")
    total = 0.0
    for i in range(n):
        a = optima.task_optima[i, task_i]
        b = optima.task_optima[i, task_j]
        for spec in layout:
            sl = slice(spec.offset, spec.offset + spec.size)
            total += l1_distance(a[sl], b[sl])
    return total / (n * l)


def pairwise_affinity_meta(
    task_i: int,
    task_j: int,
    samples_i: MtlDataset,
    samples_j: MtlDataset,
    model: MultiTaskModel,
    eta: float = DEFAULT_ETA,
) -> float:
    """SCA when each task brings its own samples (single inner Reptile step).

    Row k of ``samples_i`` and ``samples_j`` forms the k-th training unit;
    each task's optimum uses only that task's own sample.
    """
    _check_eta(eta)
    if len(samples_i) != len(samples_j):
        raise ValueError(f"unequal sample counts {len(samples_i)} and {len(samples_j)}")
    if len(samples_i) == 0:
        raise ValueError("need at least one sample pair")
    theta0 = model.shared.values
    oi = theta0 - eta * _per_sample_shared_grads(model, task_i, samples_i.X, samples_i.Y[:, task_i])
    oj = theta0 - eta * _per_sample_shared_grads(model, task_j, samples_j.X, samples_j.Y[:, task_j])
    return float(np.abs(oi - oj).sum(axis=1).mean())


def normalize_affinity(raw) -> np.ndarray:
    """Row-wise 1 - value/rowmax; an all-zero row becomes all ones."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ValueError(f"affinity matrix must be square, got {raw.shape}")
    if np.any(raw < 0):
        raise ValueError("raw affinities must be non-negative")
    out = np.ones_like(raw)
    row_max = raw.max(axis=1)
    live = row_max > 0
    out[live] = 1.0 - raw[live] / row_max[live, None]
    return out


@dataclass(frozen=True)
class AffinityMatrix:
    raw: np.ndarray
    normalized: np.ndarray
    mode: str
    n_samples: int
    task_names: tuple[str, ...]
    eta: float = DEFAULT_ETA

    @property
    def n_tasks(self) -> int:
        return self.raw.shape[0]

    def to_dict(self) -> dict:
        return {
            "task_names": list(self.task_names),
            "mode": self.mode,
            "n_samples": self.n_samples,
            "eta": self.eta,
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffinityMatrix":
        return cls(
            np.asarray(d["raw"], dtype=np.float64),
            np.asarray(d["normalized"], dtype=np.float64),
            d["mode"],
            int(d["n_samples"]),
            tuple(d["task_names"]),
            float(d.get("eta", DEFAULT_ETA)),
        )

    @classmethod
    def from_normalized(cls, normalized, task_names=None) -> "AffinityMatrix":
        """Wrap an already-normalised matrix (e.g. a synthetic block pattern)."""
        A = np.asarray(normalized, dtype=np.float64)
        names = tuple(task_names) if task_names is not None else tuple(f"task{i}" for i in range(A.shape[0]))
        return cls(1.0 - A, A, "given", 0, names)


def _raw_from_optima(O: np.ndarray) -> np.ndarray:
    # O: (n, T, M); returns the T x T mean-L1 matrix, reduced in fixed order
    T = O.shape[1]
    raw = np.zeros((T, T))
    for i in range(T):
        for j in range(i + 1, T):
            d = np.abs(O[:, i, :] - O[:, j, :]).sum(axis=1).mean()
            raw[i, j] = raw[j, i] = d
    return raw


def _raw_tensorwise(O: np.ndarray, layout) -> np.ndarray:
    T = O.shape[1]
    raw = np.zeros((T, T))
    for i in range(T):
        for j in range(i + 1, T):
            diff = np.abs(O[:, i, :] - O[:, j, :])
            per_tensor = [diff[:, s.offset : s.offset + s.size].sum(axis=1) for s in layout]
            d = np.mean(per_tensor)
            raw[i, j] = raw[j, i] = d
    return raw


def select_samples(dataset: MtlDataset, n_samples: int, rng: SeededRng) -> np.ndarray:
    """Indices of the first ``n_samples`` rows after a seeded shuffle."""
    if len(dataset) < 1:
        raise ValueError("dataset is empty")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if n_samples > len(dataset):
        raise ValueError(f"n_samples={n_samples} exceeds dataset size {len(dataset)}")
    perm = rng.make_generator().permutation(len(dataset))
    return perm[:n_samples]


def build_affinity_matrix(
    model: MultiTaskModel,
    dataset: MtlDataset,
    n_samples: int = DEFAULT_N_SAMPLES,
    eta: float = DEFAULT_ETA,
    mode: str = "vector",
    rng: SeededRng | None = None,
) -> AffinityMatrix:
    """Raw and normalised SCA matrices over a seeded subset of samples.

    In ``meta`` mode each task draws its own subset from the rows where its
    label is present, using stream ``t`` of ``rng``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = rng or SeededRng(0)
    T = model.n_tasks
    if dataset.n_tasks != T:
        raise ValueError(f"dataset has {dataset.n_tasks} tasks, model has {T}")
    if mode == "meta":
        per_task = []
        for t in range(T):
            rows = np.flatnonzero(dataset.present[:, t])
            if len(rows) < n_samples:
                raise ValueError(f"task {t} has {len(rows)} labelled rows, need {n_samples}")
            pick = rng.child(t).make_generator().permutation(len(rows))[:n_samples]
            per_task.append(dataset.rows(rows[pick]))
        theta0 = model.shared.values
        O = np.empty((n_samples, T, theta0.size))
        for t in range(T):
            O[:, t, :] = theta0 - eta * _per_sample_shared_grads(model, t, per_task[t].X, per_task[t].Y[:, t])
        raw = _raw_from_optima(O)
    else:
        idx = select_samples(dataset, n_samples, rng)
        optima = compute_sample_optima(model, dataset.rows(idx), eta)
        if mode == "vector":
            raw = _raw_from_optima(optima.task_optima)
        else:
            raw = _raw_tensorwise(optima.task_optima, model.shared.layout)
    return AffinityMatrix(raw, normalize_affinity(raw), mode, n_samples, dataset.task_names, eta)


def loss_after_step(model: MultiTaskModel, t: int, sample: MtlSample, eta: float) -> float:
    """Task loss after its own one-step optimum (how close to zero the step gets)."""
    theta = task_sample_optimum(model, t, sample, eta)
    p = forward(model.with_shared(theta.values), t, sample.x)
    return task_loss(p, sample.labels[t], model.arch.task_kinds[t])
