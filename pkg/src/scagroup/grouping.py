"""Soft clustering of task embeddings into at most ``b`` groups.

A diagonal-covariance Gaussian mixture is fitted to the GAT embeddings by
EM, tasks join every cluster whose responsibility clears a threshold (and
always their argmax cluster), singleton clusters are merged into the
nearest cluster, and the silhouette of the hard labels scores the run.
The best of several independent runs is kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numcore import SeededRng, derive_seed
from .taskgraph import GatConfig, build_graph, train_gat

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6
DEFAULT_THRESHOLD = 0.3
DEFAULT_RUNS = 10
MAX_REINITS = 3


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    reinits: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.size


def _log_gauss(Z, means, variances):
    # (n, K) log N(z_i | mu_k, diag(var_k))
    diff = Z[:, None, :] - means[None, :, :]
    return -0.5 * (
        np.sum(diff * diff / variances[None], axis=2)
        + np.sum(np.log(variances), axis=1)[None, :]
        + Z.shape[1] * np.log(2.0 * np.pi)
    )


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _log_joint(gmm: GmmModel, Z):
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return _log_gauss(Z, gmm.means, gmm.variances) + log_w[None, :]


def log_likelihood(gmm: GmmModel, Z) -> float:
    return float(np.sum(_logsumexp(_log_joint(gmm, np.asarray(Z, dtype=np.float64)), axis=1)))


def responsibilities(gmm: GmmModel, Z) -> np.ndarray:
    """Posterior component probabilities, computed in log space."""
    lj = _log_joint(gmm, np.asarray(Z, dtype=np.float64))
    r = np.exp(lj - _logsumexp(lj, axis=1)[:, None])
    return r / r.sum(axis=1, keepdims=True)


def _farthest_point_means(Z, K, gen):
    chosen = [int(gen.integers(Z.shape[0]))]
    dist = np.linalg.norm(Z - Z[chosen[0]], axis=1)
    while len(chosen) < K:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(Z - Z[nxt], axis=1))
    return Z[chosen].copy()


def gmm_fit(Z, K: int, rng: SeededRng | None = None, max_iters: int = 200, tol: float = 1e-8, floor: float = COV_FLOOR) -> GmmModel:
    """EM for a diagonal Gaussian mixture.

    Means start from farthest-point seeding (first point drawn from
    ``rng``), weights uniform, variances the global per-dimension variance.
    Variances are clipped below at ``floor`` in every M-step. A component
    that loses all responsibility mass is re-seeded at the point farthest
    from the current means (at most three times); the log-likelihood trace
    restarts after a re-seed.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, D = Z.shape
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of points {n}")
    gen = (rng or SeededRng(0)).make_generator()
    means = _farthest_point_means(Z, K, gen)
    global_var = np.maximum(Z.var(axis=0), floor)
    gmm = GmmModel(np.full(K, 1.0 / K), means, np.tile(global_var, (K, 1)))
    gmm.log_likelihood.append(log_likelihood(gmm, Z))
    for it in range(max_iters):
        r = responsibilities(gmm, Z)
        Nk = r.sum(axis=0)
        dead = np.flatnonzero(Nk < 1e-10)
        if dead.size:
            if gmm.reinits >= MAX_REINITS:
                raise RuntimeError("mixture component collapsed repeatedly")
            gmm.reinits += 1
            for k in dead:
                d = np.min(np.linalg.norm(Z[:, None, :] - gmm.means[None], axis=2), axis=1)
                gmm.means[k] = Z[int(np.argmax(d))]
                gmm.variances[k] = global_var
                gmm.weights[k] = 1.0 / K
            gmm.weights /= gmm.weights.sum()
            gmm.log_likelihood = [log_likelihood(gmm, Z)]
            continue
        gmm.weights = Nk / n
        gmm.means = (r.T @ Z) / Nk[:, None]
        diff = Z[:, None, :] - gmm.means[None]
        sq = np.einsum("nk,nkd->kd", r, diff * diff) / Nk[:, None]
        gmm.variances = np.maximum(sq, floor)
        gmm.n_iter = it + 1
        ll = log_likelihood(gmm, Z)
        prev = gmm.log_likelihood[-1]
        gmm.log_likelihood.append(ll)
        if abs(ll - prev) <= tol * max(abs(prev), 1.0):
            gmm.converged = True
            break
    return gmm


def soft_assign(r, threshold: float = DEFAULT_THRESHOLD) -> list[list[int]]:
    """Task i joins cluster k if r[i, k] >= threshold or k is its argmax."""
    r = np.asarray(r, dtype=np.float64)
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    member = r >= threshold
    member[np.arange(r.shape[0]), np.argmax(r, axis=1)] = True
    clusters = [np.flatnonzero(member[:, k]).tolist() for k in range(r.shape[1])]
    return [c for c in clusters if c]


def refine_singletons(clusters, Z) -> list[list[int]]:
    """Replace each one-task cluster by its union with the nearest cluster.

    Nearness is the euclidean distance from the singleton's embedding to the
    other clusters' centroids. Repeats until no singleton remains. With
    fewer than two tasks in total the input is returned unchanged.
    """
    Z = np.asarray(Z, dtype=np.float64)
    clusters = [sorted(set(c)) for c in clusters]
    tasks = set().union(*clusters) if clusters else set()
    if len(tasks) < 2:
        return clusters
    while True:
        singles = [k for k, c in enumerate(clusters) if len(c) == 1]
        if not singles:
            break
        k = singles[0]
        node = clusters[k][0]
        best, best_d = None, np.inf
        for j, c in enumerate(clusters):
            if j == k or c == clusters[k]:
                continue
            d = float(np.linalg.norm(Z[node] - Z[c].mean(axis=0)))
            if d < best_d:
                best, best_d = j, d
        if best is None:
            # every other cluster is this same singleton; fold in the nearest task
            others = [i for i in tasks if i != node]
            nearest = min(others, key=lambda i: float(np.linalg.norm(Z[i] - Z[node])))
            clusters[k] = sorted({node, nearest})
        else:
            clusters[k] = sorted(set(clusters[best]) | {node})
        # drop exact duplicates, keeping first occurrence
        deduped = []
        for c in clusters:
            if c not in deduped:
                deduped.append(c)
        clusters = deduped
    return clusters


def silhouette(Z, labels) -> tuple[np.ndarray, float]:
    """Per-point silhouette and its mean, euclidean distances.

    A point alone in its cluster has intra-cluster distance 0.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = np.linalg.norm(Z[:, None, :] - Z[None, :, :], axis=2)
    s = np.zeros(Z.shape[0])
    for i in range(Z.shape[0]):
        own = labels == labels[i]
        own[i] = False
        a = D[i, own].mean() if own.any() else 0.0
        b = min(D[i, labels == k].mean() for k in uniq if k != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s, float(s.mean())


@dataclass
class GroupingResult:
    clusters: list[list[int]]
    hard_labels: np.ndarray
    responsibilities: np.ndarray
    silhouettes: np.ndarray
    mean_silhouette: float
    seed: int
    run_index: int
    embeddings: np.ndarray | None = None
    gat_losses: tuple[float, ...] = ()
    log_likelihood: list[float] = field(default_factory=list)
    task_names: tuple[str, ...] = ()
    run_scores: list[float] = field(default_factory=list)

    def hard_partition(self) -> list[list[int]]:
        """Hard labels as a canonical partition (sorted groups, sorted by first task)."""
        groups = {}
        for i, k in enumerate(self.hard_labels):
            groups.setdefault(int(k), []).append(i)
        return sorted(groups.values())

    def to_dict(self) -> dict:
        names = self.task_names or tuple(f"task{i}" for i in range(len(self.hard_labels)))
        return {
            "clusters": [[names[i] for i in c] for c in self.clusters],
            "cluster_indices": [list(map(int, c)) for c in self.clusters],
            "hard_labels": [int(k) for k in self.hard_labels],
            "responsibilities": self.responsibilities.tolist(),
            "silhouettes": self.silhouettes.tolist(),
            "mean_silhouette": self.mean_silhouette,
            "seed": int(self.seed),
            "run_index": int(self.run_index),
            "run_scores": [None if not np.isfinite(v) else float(v) for v in self.run_scores],
            "task_names": list(names),
        }


def _canonical(labels):
    # relabel by first appearance so equal partitions get equal labels
    mapping = {}
    for k in labels:
        mapping.setdefault(int(k), len(mapping))
    return np.array([mapping[int(k)] for k in labels])


def refine_labels(labels, Z) -> np.ndarray:
    """Hard-label counterpart of :func:`refine_singletons`.

    A task alone under its label takes the label of the cluster whose
    centroid is nearest, until no label has a single member (or only one
    label is left).
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels).copy()
    while True:
        uniq, counts = np.unique(labels, return_counts=True)
        single = uniq[counts == 1]
        if single.size == 0 or uniq.size < 2:
            break
        k = single[0]
        node = int(np.flatnonzero(labels == k)[0])
        others = [j for j in uniq if j != k]
        target = min(others, key=lambda j: float(np.linalg.norm(Z[node] - Z[labels == j].mean(axis=0))))
        labels[node] = target
    return _canonical(labels)


def run_seed(master_seed: int, run: int) -> int:
    return derive_seed(master_seed, "group", run)


def grouping_run(
    A,
    b: int,
    seed: int,
    run_index: int = 0,
    gat_config: GatConfig = GatConfig(),
    threshold: float = DEFAULT_THRESHOLD,
) -> GroupingResult:
    """One pass: graph, GAT embeddings, GMM, soft clusters, refinement, silhouette."""
    graph = build_graph(A)
    T = graph.n_nodes
    emb = train_gat(graph, gat_config, SeededRng(seed, 0))
    Z = emb.Z
    gmm = gmm_fit(Z, min(b, T), SeededRng(seed, 1))
    r = responsibilities(gmm, Z)
    clusters = sorted(sorted(c) for c in refine_singletons(soft_assign(r, threshold), Z))
    labels = refine_labels(np.argmax(r, axis=1), Z)
    if np.unique(labels).size < 2:
        s = np.full(T, np.nan)
        s_bar = float("nan")
    else:
        s, s_bar = silhouette(Z, labels)
    return GroupingResult(
        clusters, labels, r, s, s_bar, seed, run_index, Z, emb.losses, list(gmm.log_likelihood), graph.task_names
    )


def select_grouping(
    A,
    b: int,
    runs: int = DEFAULT_RUNS,
    master_seed: int = 0,
    gat_config: GatConfig = GatConfig(),
    threshold: float = DEFAULT_THRESHOLD,
    return_runs: bool = False,
):
    """Best of ``runs`` independent grouping runs by mean silhouette.

    Run ``r`` uses seed ``derive_seed(master_seed, "group", r)``. Hard
    labels are the argmax components after singleton refinement; runs whose
    hard labels collapse to one cluster have no silhouette and are never
    selected. Ties go to the lowest run index.
    """
    if b < 2:
        raise ValueError("budget b must be at least 2")
    if runs < 1:
        raise ValueError("runs must be at least 1")
    results = [grouping_run(A, b, run_seed(master_seed, r), r, gat_config, threshold) for r in range(runs)]
    scores = [res.mean_silhouette for res in results]
    valid = [r for r in range(runs) if np.isfinite(scores[r])]
    if not valid:
        raise RuntimeError("every grouping run collapsed to a single cluster")
    best = max(valid, key=lambda r: (scores[r], -r))
    chosen = results[best]
    chosen.run_scores = scores
    return (chosen, results) if return_runs else chosen
