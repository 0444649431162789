# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled resampling kernels.

Same contracts as the NumPy fallback in ``pure.py``: border-clamped
bilinear gathering and constant-preserving separable blur.
"""

import numpy as np

cimport cython
from libc.math cimport floor

BACKEND = "ext"


def bilinear_gather(src, rows, cols):
    src32 = np.ascontiguousarray(src, dtype=np.float32)
    shape = np.shape(rows)
    r = np.ascontiguousarray(rows, dtype=np.float64).ravel()
    c = np.ascontiguousarray(cols, dtype=np.float64).ravel()
    out = np.empty((r.shape[0], src32.shape[2]), dtype=np.float32)
    _gather_f32(src32, r, c, out)
    out = out.reshape(shape + (src32.shape[2],))
    if np.asarray(src).dtype == np.float64:
        return out.astype(np.float64)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gather_f32(float[:, :, ::1] src, double[::1] rows, double[::1] cols,
                      float[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t h = src.shape[0]
    cdef Py_ssize_t w = src.shape[1]
    cdef Py_ssize_t nc = src.shape[2]
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t i, ch, r0, c0, r1, c1
    cdef double r, c
    cdef float fr, fc, one = 1.0
    cdef float top, bot
    for i in range(n):
        r = rows[i]
        c = cols[i]
        if r < 0.0:
            r = 0.0
        elif r > h - 1:
            r = h - 1
        if c < 0.0:
            c = 0.0
        elif c > w - 1:
            c = w - 1
        r0 = <Py_ssize_t>floor(r)
        c0 = <Py_ssize_t>floor(c)
        r1 = r0 + 1
        c1 = c0 + 1
        if r1 > h - 1:
            r1 = h - 1
        if c1 > w - 1:
            c1 = w - 1
        fr = <float>(r - r0)
        fc = <float>(c - c0)
        for ch in range(nc):
            top = src[r0, c0, ch] * (one - fc) + src[r0, c1, ch] * fc
            bot = src[r1, c0, ch] * (one - fc) + src[r1, c1, ch] * fc
            out[i, ch] = top * (one - fr) + bot * fr


def separable_blur(field, kernel):
    f = np.ascontiguousarray(field, dtype=np.float64)
    k = np.ascontiguousarray(kernel, dtype=np.float64)
    tmp = np.empty_like(f)
    out = np.empty_like(f)
    _blur_axis0(f, k, tmp)
    tmp_t = np.ascontiguousarray(tmp.T)
    out_t = np.empty_like(tmp_t)
    _blur_axis0(tmp_t, k, out_t)
    return np.ascontiguousarray(out_t.T)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _blur_axis0(double[:, ::1] f, double[::1] kern, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t h = f.shape[0]
    cdef Py_ssize_t w = f.shape[1]
    cdef Py_ssize_t half = (kern.shape[0] - 1) // 2
    cdef Py_ssize_t i, j, t, lo, hi
    cdef double acc, wsum, kv
    for i in range(h):
        lo = i - half
        if lo < 0:
            lo = 0
        hi = i + half
        if hi > h - 1:
            hi = h - 1
        wsum = 0.0
        for t in range(lo, hi + 1):
            wsum += kern[t - i + half]
        for j in range(w):
            acc = 0.0
            for t in range(lo, hi + 1):
                kv = kern[t - i + half]
                acc += kv * f[t, j]
            out[i, j] = acc / wsum
