"""Dense NCHW tensors, seeded initialisation and elementwise helpers.

A tensor here is a C-contiguous ``numpy.ndarray`` of rank 4 laid out as
(batch, channels, rows, cols).  Every public constructor returns float32.
float64 arrays are tolerated by the elementwise helpers so that gradient
checks can run the same code at higher precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Rng",
    "Normal",
    "Uniform",
    "check_shape",
    "as_tensor",
    "new_filled",
    "new_random",
    "add",
    "relu",
    "gelu",
    "gelu_grad",
    "global_avg_pool",
    "assert_finite",
]

GELU_C = 0.7978845608  # sqrt(2 / pi), rounded
GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised for invalid or mismatched tensor shapes."""


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 0.02

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"normal std must be > 0, got {self.std}")


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"uniform needs lo < hi, got [{self.lo}, {self.hi})")


class Rng:
    """Seeded generator: numpy ``PCG64`` driven by a 64-bit unsigned seed.

    PCG64 and numpy's ziggurat normal sampler are platform independent, so a
    given seed yields the same float32 stream everywhere.
    """

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in u64, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def sample(self, shape: Sequence[int], dist: Normal | Uniform) -> np.ndarray:
        if isinstance(dist, Normal):
            out = self._gen.normal(dist.mean, dist.std, size=tuple(shape))
        elif isinstance(dist, Uniform):
            out = self._gen.uniform(dist.lo, dist.hi, size=tuple(shape))
        else:
            raise TypeError(f"unknown distribution {dist!r}")
        return np.ascontiguousarray(out, dtype=np.float32)


def check_shape(shape: Sequence[int], rank: int = 4) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != rank:
        raise ShapeError(f"expected rank-{rank} shape, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def as_tensor(x) -> np.ndarray:
    """Validate ``x`` as an NCHW tensor; float64 stays float64, all else -> float32."""
    x = np.asarray(x)
    dtype = np.float64 if x.dtype == np.float64 else np.float32
    x = np.ascontiguousarray(x, dtype=dtype)
    check_shape(x.shape)
    return x


def new_filled(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=np.float32)


def new_random(shape: Sequence[int], rng: Rng | int, dist: Normal | Uniform = Normal()) -> np.ndarray:
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return rng.sample(check_shape(shape), dist)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def relu(x):
    return np.maximum(x, 0).astype(np.result_type(x), copy=False)


def gelu(x):
    """Tanh-approximated GELU."""
    x = np.asarray(x)
    inner = GELU_C * (x + GELU_A * x**3)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False)


def gelu_grad(x):
    """Derivative of :func:`gelu` with respect to its input."""
    x = np.asarray(x)
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x**2)
    return (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner).astype(x.dtype, copy=False)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def assert_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x
