"""Dense numerics shared by every stage: distances, optimizer steps,
finite differences and seeded random streams.

All arrays are float64. Random streams use numpy's Philox counter-based
bit generator keyed by ``SeedSequence(master_seed, spawn_key=(stream_id,))``
so a given (master_seed, stream_id) pair reproduces the same draws on any
platform numpy supports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

DEFAULT_FD_STEP = 1e-5


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_distance(a, b) -> float:
    """Sum of absolute coordinate differences between two vectors."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    _check_same_shape(a, b, "l1_distance")
    return float(np.abs(a - b).sum())


def sgd_step(params, grads, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    _check_same_shape(params, grads, "sgd_step")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return params - lr * grads


@dataclass(frozen=True)
class OptimizerState:
    """Optimizer hyper-parameters plus (for Adam) the moment estimates.

    Instances are immutable; :func:`adam_step` returns a new state.
    """

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: np.ndarray | None = field(default=None, compare=False)
    v: np.ndarray | None = field(default=None, compare=False)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")

    @classmethod
    def adam(cls, n_params: int, learning_rate: float = 1e-3, **kwargs) -> "OptimizerState":
        return cls(
            "adam",
            learning_rate,
            m=np.zeros(n_params),
            v=np.zeros(n_params),
            **kwargs,
        )

    @classmethod
    def sgd(cls, learning_rate: float) -> "OptimizerState":
        return cls("sgd", learning_rate)


def adam_step(state: OptimizerState, params, grads) -> tuple[OptimizerState, np.ndarray]:
    """One bias-corrected Adam update. Returns the new state and parameters."""
    if state.kind != "adam":
        raise ValueError("adam_step requires an adam optimizer state")
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    _check_same_shape(params, grads, "adam_step")
    m = state.m if state.m is not None else np.zeros_like(params)
    v = state.v if state.v is not None else np.zeros_like(params)
    _check_same_shape(params, m, "adam_step moments")

    t = state.step_count + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, m=m, v=v, step_count=t), new_params


def optimizer_step(state: OptimizerState, params, grads) -> tuple[OptimizerState, np.ndarray]:
    if state.kind == "sgd":
        return state, sgd_step(params, grads, state.learning_rate)
    return adam_step(state, params, grads)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = as_vector(x, "x").copy()
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    grad = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        f_plus = float(f(x))
        x[k] = orig - h
        f_minus = float(f(x))
        x[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value when perturbing coordinate {k}")
        grad[k] = (f_plus - f_minus) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class SeededRng:
    """Named random stream. Draw through :attr:`generator`."""

    master_seed: int
    stream_id: int = 0

    def make_generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.master_seed) & (2**64 - 1), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.master_seed, stream_id)


def derive_seed(master_seed: int, *labels) -> int:
    """Stable 63-bit seed from a master seed and any labels.

    Uses the first eight bytes of SHA-256 over ``"master:label1:label2..."``.
    """
    text = ":".join(str(p) for p in (int(master_seed),) + labels)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def stage_rng(master_seed: int, stage: str, run: int = 0) -> SeededRng:
    return SeededRng(derive_seed(master_seed, stage, run), 0)


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)
