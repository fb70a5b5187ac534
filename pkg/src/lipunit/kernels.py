"""Kernel dispatch: compiled Cython core when built, numpy fallback otherwise.

Set ``LIPUNIT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("LIPUNIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def levenshtein(ref, hyp, impl=None) -> int:
    impl = impl or _impl
    if impl is _fallback:
        return impl.levenshtein(ref, hyp)
    return impl.levenshtein(np.ascontiguousarray(ref, dtype=np.int64),
                            np.ascontiguousarray(hyp, dtype=np.int64))


def assign_nearest(x, centroids, impl=None):
    """Nearest centroid by squared Euclidean distance; ties go to the lowest index."""
    impl = impl or _impl
    return impl.assign_nearest(np.ascontiguousarray(x, dtype=np.float64),
                               np.ascontiguousarray(centroids, dtype=np.float64))


def centroid_sums(x, labels, k, impl=None):
    impl = impl or _impl
    return impl.centroid_sums(np.ascontiguousarray(x, dtype=np.float64),
                              np.ascontiguousarray(labels, dtype=np.int64), int(k))
