"""Weight algebra for deploy-time conversion.

Covers inference BN folding, merging a small parallel depth-wise branch into
a large kernel, expanding dilated kernels into dense sparse ones, and the
channel-aggregated kernel magnitude map used for weight visualisation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conv import ConvWeights
from .tensor import ShapeError

__all__ = [
    "BNParams",
    "BranchedConv",
    "FusedKernel",
    "ReparamError",
    "fuse_bn",
    "merge_branches",
    "center_pad",
    "densify_dilated",
    "aggregate_kernel",
]

DEFAULT_EPS = 1e-5


class ReparamError(ValueError):
    pass


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        vecs = [np.asarray(v, dtype=np.float64 if np.asarray(v).dtype == np.float64 else np.float32).reshape(-1)
                for v in (self.gamma, self.beta, self.mean, self.var)]
        if len({v.shape[0] for v in vecs}) != 1:
            raise ShapeError("BN vectors must share one length")
        self.gamma, self.beta, self.mean, self.var = vecs
        if np.any(self.var < 0):
            raise ReparamError("BN running variance must be >= 0")
        if self.eps < 0 or np.any(self.var + self.eps <= 0):
            raise ReparamError(f"BN needs eps >= 0 and var + eps > 0 (eps={self.eps})")

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS) -> "BNParams":
        """BN that maps x to x (``var = 1 - eps``)."""
        ones = np.ones(channels, np.float32)
        zeros = np.zeros(channels, np.float32)
        return cls(ones, zeros.copy(), zeros.copy(), np.full(channels, 1.0 - eps, np.float32), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) such that ``bn(x) = scale * x + shift``.

        Computed in float64 and returned in float64.
        """
        scale = self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)
        return scale, self.beta.astype(np.float64) - self.mean.astype(np.float64) * scale

    def apply(self, x: np.ndarray) -> np.ndarray:
        scale, shift = self.scale_shift()
        out = x * scale.astype(x.dtype).reshape(1, -1, 1, 1) + shift.astype(x.dtype).reshape(1, -1, 1, 1)
        return out.astype(x.dtype, copy=False)


# the deploy-time kernel is just a conv with a materialised bias
FusedKernel = ConvWeights


@dataclass
class BranchedConv:
    large: tuple[ConvWeights, BNParams]
    small: Optional[tuple[ConvWeights, BNParams]] = None

    def __post_init__(self):
        lw = self.large[0].weight
        if lw.shape[-1] % 2 == 0:
            raise ReparamError(f"large kernel must be odd, got {lw.shape[-1]}")
        if self.small is not None:
            sw = self.small[0].weight
            if sw.shape[:2] != lw.shape[:2]:
                raise ReparamError(f"branch channel layout mismatch {sw.shape} vs {lw.shape}")
            if sw.shape[-1] > lw.shape[-1]:
                raise ReparamError("small kernel larger than large kernel")
            if (lw.shape[-1] - sw.shape[-1]) % 2:
                raise ReparamError(
                    f"cannot center a {sw.shape[-1]}x{sw.shape[-1]} kernel in "
                    f"{lw.shape[-1]}x{lw.shape[-1]}: size difference must be even"
                )


def fuse_bn(w: ConvWeights, bn: BNParams) -> FusedKernel:
    """Fold an inference BN into the preceding conv."""
    if bn.channels != w.weight.shape[0]:
        raise ShapeError(f"BN has {bn.channels} channels, conv has {w.weight.shape[0]} outputs")
    scale, shift = bn.scale_shift()
    dtype = w.weight.dtype
    weight = w.weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    bias = shift + scale * w.bias.astype(np.float64)
    return ConvWeights(weight.astype(dtype), bias.astype(dtype))


def center_pad(weight: np.ndarray, size: int) -> np.ndarray:
    k = weight.shape[-1]
    if (size - k) % 2 or size < k:
        raise ReparamError(f"cannot center {k}x{k} inside {size}x{size}")
    off = (size - k) // 2
    return np.pad(weight, ((0, 0), (0, 0), (off, off), (off, off)))


def merge_branches(b: BranchedConv) -> FusedKernel:
    large = fuse_bn(*b.large)
    if b.small is None:
        return large
    small = fuse_bn(*b.small)
    k = large.weight.shape[-1]
    return ConvWeights(large.weight + center_pad(small.weight, k), large.bias + small.bias)


def densify_dilated(w: ConvWeights, dilation: int) -> ConvWeights:
    """Insert ``dilation - 1`` zeros between neighbouring taps in both axes."""
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    k = w.weight.shape[-1]
    size = (k - 1) * dilation + 1
    dense = np.zeros(w.weight.shape[:2] + (size, size), dtype=w.weight.dtype)
    dense[:, :, ::dilation, ::dilation] = w.weight
    return ConvWeights(dense, w.bias.copy())


def aggregate_kernel(w) -> np.ndarray:
    """Sum ``|w|`` over channels and rescale by the maximum (all-zero stays zero)."""
    weight = w.weight if isinstance(w, ConvWeights) else np.asarray(w)
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"expected depth-wise weights (C, 1, K, K), got {weight.shape}")
    agg = np.abs(weight[:, 0].astype(np.float64)).sum(axis=0)
    peak = agg.max()
    if peak == 0:
        return np.zeros_like(agg)
    return agg / peak
