"""Task grouping from sample-wise convergence-based affinities (SCA).

The package estimates pairwise task affinities from one-step per-sample
optima, embeds the affinity graph with a small graph attention network,
clusters the embeddings with a Gaussian mixture and trains the resulting
groups with plain multi-task SGD or a Reptile-style meta update.
"""

from .grouping import GroupingResult, select_grouping
from .harness import TrainConfig, evaluate_groupings, exhaustive_oracle
from .numcore import SeededRng, derive_seed
from .sca import AffinityMatrix, build_affinity_matrix
from .synthdata import PlantedSpec, generate_planted
from .taskgraph import GatConfig, build_graph, train_gat
from .taskmodels import ModelArch, MtlDataset, init_shared

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix",
    "GatConfig",
    "GroupingResult",
    "ModelArch",
    "MtlDataset",
    "PlantedSpec",
    "SeededRng",
    "TrainConfig",
    "build_affinity_matrix",
    "build_graph",
    "derive_seed",
    "evaluate_groupings",
    "exhaustive_oracle",
    "generate_planted",
    "init_shared",
    "select_grouping",
    "train_gat",
]
