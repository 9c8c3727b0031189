"""Backend selection for the hot inner loops.

The compiled extension is used when it was built; set ``LOCOOD_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("LOCOOD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def sorted_knn_distances(queries, index, kmax, backend=None):
    """Ascending distances from each query row to its ``kmax`` nearest ``index`` rows."""
    impl = _select(backend)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.float64)
    if queries.ndim != 2 or index.ndim != 2 or queries.shape[1] != index.shape[1]:
        raise ValueError("queries and index must be 2-D with matching width")
    if not 1 <= kmax <= index.shape[0]:
        raise ValueError(f"kmax={kmax} outside [1, {index.shape[0]}]")
    return impl.sorted_knn_distances(queries, index, int(kmax))


def average_ranks(values, backend=None):
    impl = _select(backend)
    return impl.average_ranks(np.ascontiguousarray(values, dtype=np.float64).ravel())


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {backend!r}")
