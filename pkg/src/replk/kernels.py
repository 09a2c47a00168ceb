"""Depth-wise kernel dispatch: compiled extension if importable, numpy otherwise.

Set ``REPLK_PURE_PYTHON=1`` before import to force the numpy fallback.
float64 input always takes the numpy path (the compiled kernels are f32).
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels

_ext = None
if not os.environ.get("REPLK_PURE_PYTHON"):
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

HAVE_EXTENSION = _ext is not None
IMPLEMENTATION = "cython" if HAVE_EXTENSION else "numpy"


def _pick(x):
    if _ext is not None and x.dtype == np.float32:
        return _ext
    return _pykernels


def _split_channels(fn, x, weight, bias, threads, **kw):
    # numpy releases the GIL inside its loops, so channel chunks overlap
    chunks = np.array_split(np.arange(x.shape[1]), threads)
    chunks = [ch for ch in chunks if len(ch)]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = pool.map(
            lambda ch: fn(np.ascontiguousarray(x[:, ch[0]:ch[-1] + 1]),
                          weight[ch[0]:ch[-1] + 1], bias[ch[0]:ch[-1] + 1], **kw),
            chunks,
        )
        return np.concatenate(list(parts), axis=1)


def dw_direct(x, weight, bias, stride, pad, dil, threads=1):
    impl = _pick(x)
    if impl is _pykernels and threads > 1:
        return _split_channels(_pykernels.dw_direct, x, weight, bias, threads,
                               stride=stride, pad=pad, dil=dil)
    return impl.dw_direct(x, weight, bias, stride, pad, dil, threads=threads)


def dw_blocked(x, weight, bias, stride, pad, dil, tile=8, threads=1):
    impl = _pick(x)
    if impl is _pykernels and threads > 1:
        return _split_channels(_pykernels.dw_blocked, x, weight, bias, threads,
                               stride=stride, pad=pad, dil=dil, tile=tile)
    return impl.dw_blocked(x, weight, bias, stride, pad, dil, tile=tile, threads=threads)
