# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CSR kernels. Semantics mirror ``mgfd.kernels`` fallbacks exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def spmm(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
         const double[::1] data, const double[:, ::1] x):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, c
    cdef cnp.int64_t col
    cdef double w
    with nogil:
        for i in range(n_rows):
            for j in range(indptr[i], indptr[i + 1]):
                col = indices[j]
                w = data[j]
                for c in range(d):
                    out[i, c] += w * x[col, c]
    return out_arr


def mark_neighbors(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                   const cnp.int64_t[::1] nodes, cnp.uint8_t[::1] mark):
    cdef Py_ssize_t a, j
    cdef cnp.int64_t v
    with nogil:
        for a in range(nodes.shape[0]):
            v = nodes[a]
            for j in range(indptr[v], indptr[v + 1]):
                mark[indices[j]] = 1
