"""Hot resampling kernels with a compiled core and a NumPy fallback.

The compiled extension is selected at import time when it was built;
``SSLPROF_KERNELS=python`` forces the fallback. ``bench/bench_kernels.py``
compares the two backends.

Only ``bilinear_gather`` is bound to the extension: the per-pixel gather
loop is where compilation pays off (see the benchmark). The separable blur
is always served by the NumPy implementation, whose cached banded-matrix
formulation runs through BLAS and outperforms a scalar loop; the compiled
variant remains available for comparison.
"""

from __future__ import annotations

import os

from . import pure

if os.environ.get("SSLPROF_KERNELS", "").lower() in {"python", "pure"}:
    _impl = pure
else:
    try:
        from . import _ops as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = pure

bilinear_gather = _impl.bilinear_gather
separable_blur = pure.separable_blur
BACKEND = _impl.BACKEND
HAVE_EXT = BACKEND == "ext"

__all__ = ["bilinear_gather", "separable_blur", "BACKEND", "HAVE_EXT", "pure"]
