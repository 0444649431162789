"""NumPy reference implementation of the resampling kernels.

Semantics are shared with the compiled extension in ``_ops.pyx``; both
backends must stay interchangeable (see tests/test_kernels.py).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def bilinear_gather(src: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``src`` (H, W, C) at fractional (row, col) positions.

    Out-of-range coordinates are clamped to the image border. Sampling at
    exact integer positions reproduces the stored values bit-for-bit.
    """
    h, w, _ = src.shape
    r = np.clip(rows, 0.0, float(h - 1))
    c = np.clip(cols, 0.0, float(w - 1))
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0).astype(src.dtype)[..., None]
    fc = (c - c0).astype(src.dtype)[..., None]
    one = src.dtype.type(1)
    top = src[r0, c0] * (one - fc) + src[r0, c1] * fc
    bot = src[r1, c0] * (one - fc) + src[r1, c1] * fc
    return top * (one - fr) + bot * fr


def _blur_matrix(n: int, taps: tuple[float, ...]) -> np.ndarray:
    """Banded 1-D blur matrix with per-row renormalised truncated support."""
    half = (len(taps) - 1) // 2
    kern = np.asarray(taps, dtype=np.float64)
    mat = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n - 1, i + half)
        row = kern[lo - i + half : hi - i + half + 1]
        mat[i, lo : hi + 1] = row / row.sum()
    return mat


_MATRIX_CACHE: dict[tuple[int, tuple[float, ...]], np.ndarray] = {}


def _cached_matrix(n: int, taps: tuple[float, ...]) -> np.ndarray:
    key = (n, taps)
    mat = _MATRIX_CACHE.get(key)
    if mat is None:
        mat = _blur_matrix(n, taps)
        if len(_MATRIX_CACHE) > 64:
            _MATRIX_CACHE.clear()
        _MATRIX_CACHE[key] = mat
    return mat


def separable_blur(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Blur a 2-D field with a 1-D kernel applied along both axes.

    Near the border the kernel window is truncated and renormalised, so a
    constant field stays constant.
    """
    h, w = field.shape
    taps = tuple(float(t) for t in kernel)
    mh = _cached_matrix(h, taps)
    mw = _cached_matrix(w, taps)
    return mh @ np.asarray(field, dtype=np.float64) @ mw.T
