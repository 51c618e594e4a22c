import numpy as np
import pytest

from scagroup.numcore import SeededRng
from scagroup.synthdata import PlantedSpec, generate_planted, split
from scagroup.taskmodels import ModelArch, init_shared


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def random_arch(gen, n_tasks=None, kinds=None, activation=None):
    T = int(n_tasks or gen.integers(1, 5))
    kinds = kinds or tuple(gen.choice(["mse", "bce"], size=T))
    depth = int(gen.integers(1, 3))
    return ModelArch(
        input_dim=int(gen.integers(1, 5)),
        trunk_sizes=tuple(int(s) for s in gen.integers(1, 5, size=depth)),
        task_kinds=tuple(kinds),
        head_sizes=tuple(int(s) for s in gen.integers(1, 4, size=int(gen.integers(0, 2)))),
        activation=activation or str(gen.choice(["tanh", "relu", "linear"])),
        trunk_bias=bool(gen.integers(0, 2)),
    )


def random_labels(gen, kinds):
    return np.array([float(gen.integers(0, 2)) if k == "bce" else float(gen.normal()) for k in kinds])


def planted_setup(seed, n_samples=2000, **kw):
    """T=6 planted instance (two groups of three) with its training split and model."""
    spec = PlantedSpec(n_groups=2, tasks_per_group=3, input_dim=8, n_samples=n_samples, seed=seed, **kw)
    ds, groups = generate_planted(spec)
    train, val, test = split(ds, spec.split_fractions, SeededRng(seed, 5))
    arch = ModelArch(ds.input_dim, (16,), ds.task_kinds)
    model = init_shared(arch, SeededRng(seed, 3))
    return spec, ds, groups, (train, val, test), arch, model


# one PASS/FAIL line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
