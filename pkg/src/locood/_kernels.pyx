# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: k-nearest-neighbour distance sweeps and tie-averaged ranks."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def sorted_knn_distances(const double[:, ::1] queries, const double[:, ::1] index, Py_ssize_t kmax):
    """Return the ``kmax`` smallest Euclidean distances from each query to ``index``, ascending."""
    cdef Py_ssize_t nq = queries.shape[0], n = index.shape[0], d = queries.shape[1]
    cdef Py_ssize_t i, j, t, pos, filled
    cdef double acc, diff, dist
    out_arr = np.empty((nq, kmax), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(nq):
            filled = 0
            for j in range(n):
                acc = 0.0
                for t in range(d):
                    diff = queries[i, t] - index[j, t]
                    acc = acc + diff * diff
                dist = sqrt(acc)
                if filled == kmax and dist >= out[i, kmax - 1]:
                    continue
                # insertion into the sorted prefix out[i, :filled]
                if filled < kmax:
                    pos = filled
                    filled = filled + 1
                else:
                    pos = kmax - 1
                while pos > 0 and out[i, pos - 1] > dist:
                    out[i, pos] = out[i, pos - 1]
                    pos = pos - 1
                out[i, pos] = dist
    return out_arr


def average_ranks(const double[::1] values):
    """1-based ranks of ``values`` with ties replaced by their mean rank."""
    cdef Py_ssize_t n = values.shape[0], i, j, k
    cdef cnp.intp_t[::1] order = np.argsort(values, kind="mergesort")
    ranks_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] ranks = ranks_arr
    cdef double r
    with nogil:
        i = 0
        while i < n:
            j = i
            while j + 1 < n and values[order[j + 1]] == values[order[i]]:
                j = j + 1
            r = 0.5 * (i + j) + 1.0
            for k in range(i, j + 1):
                ranks[order[k]] = r
            i = j + 1
    return ranks_arr
