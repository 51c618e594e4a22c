"""Planted multi-task datasets with known task groups."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numcore import SeededRng
from .taskmodels import MtlDataset


@dataclass(frozen=True)
class PlantedSpec:
    n_groups: int = 2
    tasks_per_group: int = 3
    input_dim: int = 8
    n_samples: int = 2000
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    rho_in: float = 0.95
    rho_out: float = 0.0
    noise: float = 0.0
    kinds: tuple[str, ...] = ("mse",)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if self.n_groups < 1 or self.tasks_per_group < 1 or self.input_dim < 1 or self.n_samples < 1:
            raise ValueError("group count, group size, input_dim and n_samples must be positive")
        for name in ("rho_in", "rho_out"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_groups > 1 and not self.rho_in > self.rho_out:
            raise ValueError("rho_in must exceed rho_out")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be three values summing to 1")
        if any(f < 0 for f in self.split_fractions):
            raise ValueError("split fractions must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if len(self.kinds) not in (1, self.n_groups):
            raise ValueError("give one task kind, or one per group")

    @property
    def n_tasks(self) -> int:
        return self.n_groups * self.tasks_per_group

    def group_kind(self, g: int) -> str:
        return self.kinds[0] if len(self.kinds) == 1 else self.kinds[g]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["kinds"] = list(self.kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedSpec":
        return cls(**{**d, "split_fractions": tuple(d.get("split_fractions", (0.6, 0.2, 0.2))), "kinds": tuple(d.get("kinds", ("mse",)))})


def _unit_rows(M: np.ndarray) -> np.ndarray:
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def planted_teachers(spec: PlantedSpec, gen: np.random.Generator) -> np.ndarray:
    """Teacher vectors, one row per task, each scaled to norm sqrt(input_dim).

    Group bases are rho_out * common + sqrt(1 - rho_out²) * own, with the
    common and own directions mutually orthogonal; a task's teacher is
    rho_in * base + sqrt(1 - rho_in²) * fresh noise direction.
    """
    d = spec.input_dim
    scale = np.sqrt(d)
    raw = gen.standard_normal((d, spec.n_groups + 1))
    if spec.n_groups + 1 <= d:
        q, _ = np.linalg.qr(raw)
        dirs = q.T[: spec.n_groups + 1]
    else:
        dirs = _unit_rows(raw.T)
    common, own = dirs[0], dirs[1:]
    bases = spec.rho_out * common + np.sqrt(1.0 - spec.rho_out**2) * own
    bases = _unit_rows(bases)
    teachers = []
    for g in range(spec.n_groups):
        for _ in range(spec.tasks_per_group):
            e = gen.standard_normal(d)
            e /= np.linalg.norm(e)
            w = spec.rho_in * bases[g] + np.sqrt(1.0 - spec.rho_in**2) * e
            teachers.append(scale * w)
    return np.asarray(teachers)


def generate_planted(spec: PlantedSpec) -> tuple[MtlDataset, list[list[int]]]:
    """Draw a planted dataset. Returns it with the ground-truth task groups.

    Labels are teacher·x / sqrt(input_dim) plus Gaussian noise; binary tasks
    threshold that value at zero.
    """
    gen = SeededRng(spec.seed, 0).make_generator()
    teachers = planted_teachers(spec, gen)
    X = gen.standard_normal((spec.n_samples, spec.input_dim))
    signal = X @ teachers.T / np.sqrt(spec.input_dim)
    noisy = signal + spec.noise * gen.standard_normal(signal.shape) if spec.noise > 0 else signal
    kinds = []
    names = []
    Y = np.empty_like(noisy)
    for g in range(spec.n_groups):
        kind = spec.group_kind(g)
        for k in range(spec.tasks_per_group):
            t = g * spec.tasks_per_group + k
            names.append(f"g{g}t{k}")
            kinds.append(kind)
            Y[:, t] = (noisy[:, t] > 0).astype(np.float64) if kind == "bce" else noisy[:, t]
    groups = [list(range(g * spec.tasks_per_group, (g + 1) * spec.tasks_per_group)) for g in range(spec.n_groups)]
    return MtlDataset(X, Y, tuple(names), tuple(kinds)), groups


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    """floor() for validation and test; the remainder goes to train."""
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    return n - n_val - n_test, n_val, n_test


def split(dataset: MtlDataset, fractions, rng: SeededRng) -> tuple[MtlDataset, MtlDataset, MtlDataset]:
    """Seeded shuffle, then contiguous train/validation/test slices."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative values summing to 1")
    n_train, n_val, n_test = split_sizes(len(dataset), fractions)
    for name, size, frac in (("train", n_train, fractions[0]), ("validation", n_val, fractions[1]), ("test", n_test, fractions[2])):
        if frac > 0 and size == 0:
            raise ValueError(f"{name} split is empty")
    perm = rng.make_generator().permutation(len(dataset))
    return (
        dataset.rows(perm[:n_train]),
        dataset.rows(perm[n_train : n_train + n_val]),
        dataset.rows(perm[n_train + n_val :]),
    )


# ---------------------------------------------------------------------------
# CSV export / import
#
# <dir>/features.csv       header x0,...,x{d-1}; one row per sample
# <dir>/labels_<task>.csv  header "label"; row-aligned with features.csv
# <dir>/dataset.json       task names and kinds in column order, groups


def save_dataset(dataset: MtlDataset, directory, groups=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"x{k}" for k in range(dataset.input_dim))
    np.savetxt(directory / "features.csv", dataset.X, delimiter=",", header=header, comments="", fmt="%.17g")
    for t, name in enumerate(dataset.task_names):
        col = np.where(dataset.present[:, t], dataset.Y[:, t], np.nan)
        np.savetxt(directory / f"labels_{name}.csv", col, delimiter=",", header="label", comments="", fmt="%.17g")
    manifest = {
        "task_names": list(dataset.task_names),
        "task_kinds": list(dataset.task_kinds),
        "n_samples": len(dataset),
        "input_dim": dataset.input_dim,
        "groups": groups,
    }
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> tuple[MtlDataset, list[list[int]] | None]:
    directory = Path(directory)
    manifest_path = directory / "dataset.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing dataset manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    X = np.loadtxt(directory / "features.csv", delimiter=",", skiprows=1, ndmin=2)
    cols = []
    for name in manifest["task_names"]:
        path = directory / f"labels_{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing label file {path}")
        cols.append(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=1))
    Y = np.stack(cols, axis=1)
    present = ~np.isnan(Y)
    Y = np.where(present, Y, 0.0)
    ds = MtlDataset(X, Y, tuple(manifest["task_names"]), tuple(manifest["task_kinds"]), present)
    return ds, manifest.get("groups")
