"""Hot CSR kernels with a compiled backend and a numpy fallback.

The compiled extension ``mgfd._kernels`` is used when it imports; setting
``MGFD_BACKEND=python`` forces the fallback.  Both backends compute the same
values; summation order differs, so results agree to rounding, not bitwise.
"""

from __future__ import annotations

import os

import numpy as np


def spmm_python(indptr: np.ndarray, indices: np.ndarray, data: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``A @ x`` for a CSR matrix ``A`` given by its three arrays."""
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, x.shape[1]))
    if indices.size == 0:
        return out
    contrib = data[:, None] * x[indices]
    starts = indptr[:-1]
    nonempty = indptr[1:] > starts
    out[nonempty] = np.add.reduceat(contrib, starts[nonempty], axis=0)
    return out


def mark_neighbors_python(indptr: np.ndarray, indices: np.ndarray, nodes: np.ndarray, mark: np.ndarray) -> None:
    if nodes.size == 0:
        return
    lo = indptr[nodes]
    hi = indptr[nodes + 1]
    lens = hi - lo
    total = int(lens.sum())
    if total == 0:
        return
    offsets = np.repeat(lo - np.cumsum(lens) + lens, lens)
    pos = np.arange(total) + offsets
    mark[indices[pos]] = 1


def _load_compiled():
    if os.environ.get("MGFD_BACKEND", "").lower() == "python":
        return None
    try:
        from mgfd import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()

BACKEND = "compiled" if _compiled is not None else "python"


def spmm(indptr, indices, data, x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _compiled is not None:
        return _compiled.spmm(indptr, indices, data, x)
    return spmm_python(indptr, indices, data, x)


def mark_neighbors(indptr, indices, nodes, mark):
    nodes = np.ascontiguousarray(nodes, dtype=np.int64)
    if _compiled is not None:
        _compiled.mark_neighbors(indptr, indices, nodes, mark)
    else:
        mark_neighbors_python(indptr, indices, nodes, mark)
