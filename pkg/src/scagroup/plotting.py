"""Figures rendered next to the report's TSV plot data."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def affinity_heatmap(raw, normalized, names, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, M, title, cmap in ((axes[0], raw, "mean L1 distance", "viridis_r"), (axes[1], normalized, "SCA affinity", "viridis")):
        im = ax.imshow(np.asarray(M), cmap=cmap)
        ax.set_xticks(range(len(names)), names, rotation=90, fontsize=8)
        ax.set_yticks(range(len(names)), names, fontsize=8)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def silhouette_bars(names, silhouettes, labels, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = np.asarray(labels)
    colors = plt.cm.tab10(labels % 10)
    ax.bar(range(len(names)), silhouettes, color=colors)
    ax.axhline(float(np.nanmean(silhouettes)), color="k", lw=1, ls="--", label="mean")
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=8)
    ax.set_ylim(-1, 1)
    ax.set_ylabel("silhouette")
    ax.legend(frameon=False)
    return _save(fig, path)


def loss_curves(curves: dict, path, ylabel="average loss"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, curve in curves.items():
        ax.plot(range(len(curve)), curve, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    if len(curves) <= 12:
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def grouping_scores(labels, scores, path, highlight=None):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    colors = ["tab:orange" if (highlight is not None and lab == highlight) else "tab:blue" for lab in labels]
    ax.barh(range(len(labels)), scores, color=colors)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    ax.set_xlabel("collective performance")
    ax.invert_yaxis()
    return _save(fig, path)
