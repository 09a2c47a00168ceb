"""2D convolution with interchangeable forward backends and an input VJP.

Convention is cross-correlation with zero padding (no kernel flip), NCHW.
Two groupings are supported: dense (``groups == 1``) and depth-wise
(``groups == in_channels == out_channels``).

Backends
--------
direct
    Reference summation.  Depth-wise goes through :mod:`replk.kernels`.
blocked
    Output processed in ``tile x tile`` blocks with the input patch staged
    contiguously (block-wise implicit GEMM); dense convs run one GEMM per
    band of ``tile`` output rows.
fft
    Per-channel linear convolution through zero-padded real 2D FFTs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import ShapeError, as_tensor

__all__ = [
    "BACKENDS",
    "ConvSpec",
    "ConvWeights",
    "conv2d",
    "conv2d_direct",
    "conv2d_blocked",
    "conv2d_fft",
    "conv2d_vjp_input",
    "flops_of",
    "params_of",
    "out_size",
]

BACKENDS = ("direct", "blocked", "fft")


def out_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        k = self.kernel_size
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {k}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.groups != 1:
            if not self.groups == self.in_channels == self.out_channels:
                raise ValueError(
                    "depth-wise conv requires in_channels == out_channels == groups, got "
                    f"{self.in_channels}/{self.out_channels}/{self.groups}"
                )

    @classmethod
    def same(cls, kernel_size, in_channels, out_channels=None, stride=1, dilation=1,
             depthwise=False):
        """Spec whose stride-1 output matches the input size (``pad = d(K-1)/2``)."""
        if kernel_size % 2 == 0:
            raise ValueError(f"'same' padding needs an odd kernel, got {kernel_size}")
        out_channels = in_channels if out_channels is None else out_channels
        return cls(kernel_size, in_channels, out_channels, stride,
                   dilation * (kernel_size - 1) // 2, dilation,
                   in_channels if depthwise else 1)

    @property
    def depthwise(self) -> bool:
        return self.groups > 1 or (self.in_channels == self.out_channels == 1)

    @property
    def extent(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.extent > h + 2 * self.padding or self.extent > w + 2 * self.padding:
            raise ShapeError(
                f"kernel extent {self.extent} exceeds padded input {h}x{w} (+2*{self.padding})"
            )
        k, s, p, d = self.kernel_size, self.stride, self.padding, self.dilation
        return out_size(h, k, s, p, d), out_size(w, k, s, p, d)

    def to_dict(self) -> dict:
        return dict(kernel_size=self.kernel_size, in_channels=self.in_channels,
                    out_channels=self.out_channels, stride=self.stride,
                    padding=self.padding, dilation=self.dilation, groups=self.groups)


@dataclass
class ConvWeights:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        dtype = np.float64 if w.dtype == np.float64 else np.float32
        self.weight = np.ascontiguousarray(w, dtype=dtype)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0], dtype=dtype)
        else:
            self.bias = np.ascontiguousarray(self.bias, dtype=dtype).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(f"bias length {self.bias.shape[0]} != out channels {self.weight.shape[0]}")

    def check(self, spec: ConvSpec) -> None:
        if self.weight.shape != spec.weight_shape:
            raise ShapeError(f"weight shape {self.weight.shape} does not match spec {spec.weight_shape}")


def _prepare(x, w: ConvWeights, spec: ConvSpec):
    x = as_tensor(x)
    w.check(spec)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    weight, bias = w.weight.astype(x.dtype, copy=False), w.bias.astype(x.dtype, copy=False)
    return x, weight, bias, oh, ow


def _pad(x, p):
    return x if p == 0 else np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_direct(x, w: ConvWeights, spec: ConvSpec, threads: int = 1) -> np.ndarray:
    x, weight, bias, oh, ow = _prepare(x, w, spec)
    s, p, d = spec.stride, spec.padding, spec.dilation
    if spec.depthwise:
        return kernels.dw_direct(x, np.ascontiguousarray(weight[:, 0]), bias, s, p, d, threads=threads)
    xp = _pad(x, p)
    out = np.zeros((x.shape[0], spec.out_channels, oh, ow), dtype=x.dtype)
    for ki in range(spec.kernel_size):
        for kj in range(spec.kernel_size):
            view = xp[:, :, ki * d:ki * d + (oh - 1) * s + 1:s, kj * d:kj * d + (ow - 1) * s + 1:s]
            out += np.einsum("oc,nchw->nohw", weight[:, :, ki, kj], view, optimize=True)
    out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_blocked(x, w: ConvWeights, spec: ConvSpec, tile: int = 8, threads: int = 1) -> np.ndarray:
    x, weight, bias, oh, ow = _prepare(x, w, spec)
    s, p, d = spec.stride, spec.padding, spec.dilation
    if spec.depthwise:
        return kernels.dw_blocked(x, np.ascontiguousarray(weight[:, 0]), bias, s, p, d,
                                  tile=tile, threads=threads)
    n, k = x.shape[0], spec.kernel_size
    if k == 1 and s == 1 and p == 0:
        # pointwise: one GEMM over all pixels, no staging needed
        out = np.einsum("oc,nchw->nohw", weight[:, :, 0, 0], x, optimize=True)
        return out + bias.reshape(1, -1, 1, 1)
    xp = _pad(x, p)
    span = spec.extent
    gemm_w = weight.reshape(spec.out_channels, -1).T  # (cin*k*k, cout)
    out = np.empty((n, spec.out_channels, oh, ow), dtype=x.dtype)
    for r0 in range(0, oh, tile):
        rows = min(tile, oh - r0)
        band = xp[:, :, r0 * s:r0 * s + (rows - 1) * s + span, :]
        win = sliding_window_view(band, (span, span), axis=(2, 3))[:, :, ::s, ::s, ::d, ::d]
        win = win[:, :, :rows, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, rows * ow, -1)
        res = cols @ gemm_w + bias
        out[:, :, r0:r0 + rows] = res.reshape(n, rows, ow, -1).transpose(0, 3, 1, 2)
    return out


def conv2d_fft(x, w: ConvWeights, spec: ConvSpec) -> np.ndarray:
    x, weight, bias, oh, ow = _prepare(x, w, spec)
    if spec.dilation > 1:
        from .reparam import densify_dilated

        weight = densify_dilated(ConvWeights(weight), spec.dilation).weight.astype(x.dtype)
    n, _, h, wd = x.shape
    k = weight.shape[-1]
    p = spec.padding
    if k == 1 and not spec.depthwise:
        # a 1x1 kernel's transform is constant; the pointwise product is exact
        full = np.einsum("oc,nchw->nohw", weight[:, :, 0, 0], _pad(x, p), optimize=True)
    else:
        hp, wp = h + 2 * p, wd + 2 * p
        shape = (scipy.fft.next_fast_len(hp + k - 1, real=True),
                 scipy.fft.next_fast_len(wp + k - 1, real=True))
        fx = scipy.fft.rfft2(_pad(x, p), s=shape, axes=(2, 3))
        # correlation == convolution with the flipped kernel
        fk = scipy.fft.rfft2(weight[:, :, ::-1, ::-1], s=shape, axes=(2, 3))
        if spec.depthwise:
            prod = fx * fk[:, 0][None]
        else:
            prod = np.einsum("ncij,ocij->noij", fx, fk, optimize=True)
        full = scipy.fft.irfft2(prod, s=shape, axes=(2, 3))
        full = full[:, :, k - 1:hp, k - 1:wp]
    out = full[:, :, ::spec.stride, ::spec.stride][:, :, :oh, :ow]
    return np.ascontiguousarray(out + bias.reshape(1, -1, 1, 1), dtype=x.dtype)


def conv2d(x, w: ConvWeights, spec: ConvSpec, backend: str = "direct", tile: int = 8,
           threads: int = 1) -> np.ndarray:
    if backend == "direct":
        return conv2d_direct(x, w, spec, threads=threads)
    if backend == "blocked":
        return conv2d_blocked(x, w, spec, tile=tile, threads=threads)
    if backend == "fft":
        return conv2d_fft(x, w, spec)
    raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")


def conv2d_vjp_input(grad_out, w: ConvWeights, spec: ConvSpec, input_shape) -> np.ndarray:
    """Return d<grad_out, conv(x)>/dx, i.e. the transposed convolution of ``grad_out``."""
    g = as_tensor(grad_out)
    n, cin, h, wd = input_shape
    oh, ow = spec.output_hw(h, wd)
    if g.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {g.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    w.check(spec)
    weight = w.weight.astype(g.dtype, copy=False)
    k, s, p, d = spec.kernel_size, spec.stride, spec.padding, spec.dilation
    back_pad = d * (k - 1) - p
    if spec.depthwise and s == 1 and back_pad >= 0 and oh + 2 * back_pad - d * (k - 1) == h:
        # stride 1: correlate with the flipped kernel, reusing the forward kernels
        flipped = np.ascontiguousarray(weight[:, 0, ::-1, ::-1])
        zero = np.zeros(cin, dtype=g.dtype)
        return kernels.dw_blocked(g, flipped, zero, 1, back_pad, d)
    gx = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=g.dtype)
    for ki in range(k):
        rows = slice(ki * d, ki * d + (oh - 1) * s + 1, s)
        for kj in range(k):
            cols = slice(kj * d, kj * d + (ow - 1) * s + 1, s)
            if spec.depthwise:
                gx[:, :, rows, cols] += g * weight[:, 0, ki, kj].reshape(1, -1, 1, 1)
            else:
                gx[:, :, rows, cols] += np.einsum("oc,nohw->nchw", weight[:, :, ki, kj], g, optimize=True)
    return np.ascontiguousarray(gx[:, :, p:p + h, p:p + wd])


def params_of(spec: ConvSpec, bias: bool = False) -> int:
    k = spec.kernel_size
    count = spec.out_channels * (spec.in_channels // spec.groups) * k * k
    return count + (spec.out_channels if bias else 0)


def flops_of(spec: ConvSpec, out_h: int, out_w: int, batch: int = 1) -> int:
    """Multiply-accumulate count (reported as "FLOPs", one MAC each)."""
    return params_of(spec) * out_h * out_w * batch
