"""Small dense-numerics layer shared by the encoder, training loop and metrics.

Everything is float64. The random source is a seeded PCG64 stream with
Box-Muller normals so that draws are reproducible across platforms without
depending on library-specific normal samplers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericsWarning",
    "RandomSource",
    "gaussian",
    "matmul",
    "inner_product",
    "softmax",
    "softmax_rows",
    "relu",
    "l2_normalize",
    "BatchNormState",
    "batchnorm",
    "batchnorm_train_cached",
    "grad_check",
]


class NumericsWarning(UserWarning):
    """Raised-as-warning for recoverable numeric degeneracies (zero norms etc.)."""


class RandomSource:
    """Deterministic random stream: PCG64 uniforms, Box-Muller normals.

    Scalar normal draws consume two uniforms and keep only the cosine branch;
    array draws use both branches of each pair. The exact consumption pattern
    is part of the reproducibility contract.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        if size is None:
            u1 = 1.0 - self._gen.random()  # (0, 1]: keeps log finite
            u2 = self._gen.random()
            z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
            return mean + std * z
        shape = (size,) if isinstance(size, int) else tuple(size)
        m = int(np.prod(shape))
        npairs = (m + 1) // 2
        u1 = 1.0 - self._gen.random(npairs)
        u2 = self._gen.random(npairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                            radius * np.sin(2.0 * np.pi * u2)])[:m]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int) -> int:
        """One integer uniform on [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian(rng: RandomSource, mean: float, std: float) -> float:
    """One draw from N(mean, std^2); std=0 returns mean exactly."""
    if std == 0.0:
        return float(mean)
    return float(rng.normal(mean, std))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def inner_product(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"inner_product length mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(np.dot(u, v))


def softmax(row: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a single vector (max-subtracted)."""
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(row)):
        raise ValueError("softmax requires finite entries")
    e = np.exp(row - row.max())
    return e / e.sum()


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over the last axis (any leading batch shape)."""
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||; near-zero norm returns the input unchanged with a warning."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        warnings.warn("l2_normalize: vector norm <= 1e-12, returned unnormalized",
                      NumericsWarning, stacklevel=2)
        return v.copy()
    return v / norm


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one normalized width."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        widths = {self.gamma.shape, self.beta.shape,
                  self.running_mean.shape, self.running_var.shape}
        if len(widths) != 1:
            raise ValueError("batch-norm vectors must share one length")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var entries must be >= 0")

    @classmethod
    def initial(cls, width: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            epsilon=epsilon,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            epsilon=self.epsilon,
        )


def batchnorm_train_cached(x: np.ndarray, state: BatchNormState, update_running: bool = True):
    """Train-mode batch norm returning backward cache (x_hat, inv_std).

    Normalizes by population batch statistics and, unless ``update_running``
    is false, folds them into the running statistics with the configured
    momentum (new batch weighted by momentum).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("train-mode batch norm needs a batch of >= 2 vectors")
    mean = x.mean(axis=0)
    var = x.var(axis=0)  # population (ddof=0)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean) * inv_std
    out = state.gamma * x_hat + state.beta
    if update_running:
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
    return out, x_hat, inv_std


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str) -> np.ndarray:
    """Batch normalization; ``train`` updates running stats, ``eval`` is pure.

    Eval mode accepts a single vector or a batch and never mutates the state.
    """
    if mode == "train":
        out, _, _ = batchnorm_train_cached(x, state)
        return out
    if mode == "eval":
        x = np.asarray(x, dtype=np.float64)
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        return state.gamma * (x - state.running_mean) * inv_std + state.beta
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def grad_check(f, params: dict, analytic_grads: dict, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` is called as ``f(params)`` and must be a deterministic scalar
    function of the arrays in ``params``. The arrays are perturbed in place,
    one coordinate at a time, and restored afterwards. The relative error per
    coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if h <= 0:
        raise ValueError("step h must be > 0")
    worst = 0.0
    for name, theta in params.items():
        grad = np.asarray(analytic_grads[name])
        if grad.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not theta.flags.c_contiguous:
            raise ValueError(f"parameter {name!r} must be C-contiguous "
                             "(reshape would copy and in-place perturbation would be lost)")
        flat = theta.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(params))
            flat[i] = orig - h
            f_minus = float(f(params))
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError(f"non-finite loss while perturbing {name!r}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst
