# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled depth-wise convolution kernels.

Both kernels operate on float32 NCHW input, one (K, K) filter per channel,
zero padding, and parallelise over the ``n * c`` channel planes with OpenMP.
The pure-numpy twins live in :mod:`replk._pykernels`.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdlib cimport malloc, free
from libc.string cimport memset

cnp.import_array()

DEF MAX_TILE = 64


cdef void _direct_plane(const float* xp, const float* wp, float b,
                        float* op, int h, int w, int k, int stride, int pad,
                        int dil, int oh, int ow) noexcept nogil:
    cdef int r, c, ki, kj, ih, iw
    cdef double acc  # f64 accumulation keeps long reductions near f32 rounding
    for r in range(oh):
        for c in range(ow):
            acc = b
            for ki in range(k):
                ih = r * stride - pad + ki * dil
                if ih < 0 or ih >= h:
                    continue
                for kj in range(k):
                    iw = c * stride - pad + kj * dil
                    if iw < 0 or iw >= w:
                        continue
                    acc = acc + <double>xp[ih * w + iw] * wp[ki * k + kj]
            op[r * ow + c] = acc


cdef inline void _row8(const float* src, int pw, const float* wp, int k,
                       int dil, float b, double* dst) noexcept nogil:
    # eight accumulators kept in registers across the whole k*k reduction
    cdef double a0 = b, a1 = b, a2 = b, a3 = b, a4 = b, a5 = b, a6 = b, a7 = b
    cdef double wv
    cdef const float* p
    cdef int ki, kj
    for ki in range(k):
        for kj in range(k):
            wv = wp[ki * k + kj]
            p = src + ki * dil * pw + kj * dil
            a0 += wv * p[0]
            a1 += wv * p[1]
            a2 += wv * p[2]
            a3 += wv * p[3]
            a4 += wv * p[4]
            a5 += wv * p[5]
            a6 += wv * p[6]
            a7 += wv * p[7]
    dst[0] = a0
    dst[1] = a1
    dst[2] = a2
    dst[3] = a3
    dst[4] = a4
    dst[5] = a5
    dst[6] = a6
    dst[7] = a7


cdef void _blocked_plane(const float* xp, const float* wp, float b,
                         float* op, float* patch, int h, int w, int k,
                         int stride, int pad, int dil, int oh, int ow,
                         int tile) noexcept nogil:
    cdef int r0, c0, rows, cols, ph, pw, pr, pc, ih, iw, ki, kj, r, c
    cdef int span = (k - 1) * dil + 1
    cdef double wv
    cdef double acc[MAX_TILE * MAX_TILE]
    cdef const float* src
    r0 = 0
    while r0 < oh:
        rows = min(tile, oh - r0)
        ph = (rows - 1) * stride + span
        c0 = 0
        while c0 < ow:
            cols = min(tile, ow - c0)
            pw = (cols - 1) * stride + span
            # stage the zero-padded input patch contiguously
            for pr in range(ph):
                ih = r0 * stride - pad + pr
                if ih < 0 or ih >= h:
                    memset(&patch[pr * pw], 0, pw * sizeof(float))
                    continue
                for pc in range(pw):
                    iw = c0 * stride - pad + pc
                    if iw < 0 or iw >= w:
                        patch[pr * pw + pc] = 0.0
                    else:
                        patch[pr * pw + pc] = xp[ih * w + iw]
            if stride == 1 and cols == 8:
                for r in range(rows):
                    _row8(patch + r * pw, pw, wp, k, dil, b, &acc[r * tile])
            else:
                for r in range(rows * tile):
                    acc[r] = b
                for ki in range(k):
                    for kj in range(k):
                        wv = wp[ki * k + kj]
                        for r in range(rows):
                            src = &patch[(r * stride + ki * dil) * pw + kj * dil]
                            for c in range(cols):
                                acc[r * tile + c] += wv * src[c * stride]
            for r in range(rows):
                for c in range(cols):
                    op[(r0 + r) * ow + c0 + c] = <float>acc[r * tile + c]
            c0 += tile
        r0 += tile


def dw_direct(float[:, :, :, ::1] x, float[:, :, ::1] weight, float[::1] bias,
              int stride, int pad, int dil, int threads=1):
    cdef int n = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int k = weight.shape[1]
    cdef int oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    cdef int ow = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.empty((n, ch, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef int plane, i, c
    for plane in prange(n * ch, nogil=True, num_threads=threads, schedule="static"):
        i = plane // ch
        c = plane % ch
        _direct_plane(&x[i, c, 0, 0], &weight[c, 0, 0], bias[c], &o[i, c, 0, 0],
                      h, w, k, stride, pad, dil, oh, ow)
    return out


def dw_blocked(float[:, :, :, ::1] x, float[:, :, ::1] weight, float[::1] bias,
               int stride, int pad, int dil, int tile=8, int threads=1):
    if tile < 1 or tile > MAX_TILE:
        raise ValueError(f"tile must be in [1, {MAX_TILE}], got {tile}")
    cdef int n = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int k = weight.shape[1]
    cdef int oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    cdef int ow = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
    cdef int side = (tile - 1) * stride + (k - 1) * dil + 1
    out = np.empty((n, ch, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef int plane, i, c
    cdef float* patch
    with nogil:
        for plane in prange(n * ch, num_threads=threads, schedule="static"):
            patch = <float*>malloc(side * side * sizeof(float))
            i = plane // ch
            c = plane % ch
            _blocked_plane(&x[i, c, 0, 0], &weight[c, 0, 0], bias[c],
                           &o[i, c, 0, 0], patch, h, w, k, stride, pad, dil,
                           oh, ow, tile)
            free(patch)
    return out
