"""Pure-numpy depth-wise kernels with the same contract as ``_ckernels``.

Used when the compiled extension is unavailable, and always for float64
input.  Both accumulate in float64 and round once on output, like the
compiled kernels.  ``dw_direct`` accumulates one shifted input view per kernel tap;
``dw_blocked`` walks output tiles, stages each tile's input patch and
contracts it against the filter in a single einsum.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size, k, stride, pad, dil):
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def dw_direct(x, weight, bias, stride, pad, dil, threads=1):
    n, c, h, w = x.shape
    k = weight.shape[1]
    oh, ow = _out_size(h, k, stride, pad, dil), _out_size(w, k, stride, pad, dil)
    xp = _pad(x, pad)
    weight = weight.astype(np.float64)
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    out[...] = bias.reshape(1, c, 1, 1)
    for ki in range(k):
        r0 = ki * dil
        rows = slice(r0, r0 + (oh - 1) * stride + 1, stride)
        for kj in range(k):
            c0 = kj * dil
            cols = slice(c0, c0 + (ow - 1) * stride + 1, stride)
            out += xp[:, :, rows, cols] * weight[:, ki, kj].reshape(1, c, 1, 1)
    return out.astype(x.dtype, copy=False)


def dw_blocked(x, weight, bias, stride, pad, dil, tile=8, threads=1):
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    n, c, h, w = x.shape
    k = weight.shape[1]
    span = (k - 1) * dil + 1
    oh, ow = _out_size(h, k, stride, pad, dil), _out_size(w, k, stride, pad, dil)
    xp = _pad(x, pad)
    weight = weight.astype(np.float64)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    b = bias.reshape(1, c, 1, 1)
    for r0 in range(0, oh, tile):
        rows = min(tile, oh - r0)
        ph = (rows - 1) * stride + span
        for c0 in range(0, ow, tile):
            cols = min(tile, ow - c0)
            pw = (cols - 1) * stride + span
            patch = np.ascontiguousarray(
                xp[:, :, r0 * stride:r0 * stride + ph, c0 * stride:c0 * stride + pw]
            )
            win = sliding_window_view(patch, (span, span), axis=(2, 3))
            win = win[:, :, ::stride, ::stride, ::dil, ::dil]
            out[:, :, r0:r0 + rows, c0:c0 + cols] = (
                np.einsum("ncrsij,cij->ncrs", win, weight, optimize=True) + b
            )
    return out
