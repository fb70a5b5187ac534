# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match :mod:`lipunit._fallback` exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def levenshtein(const long long[::1] ref, const long long[::1] hyp):
    cdef Py_ssize_t n = ref.shape[0], m = hyp.shape[0], i, j
    cdef long long sub, ins, dele, best
    cdef long long[::1] prev = np.arange(m + 1, dtype=np.int64)
    cdef long long[::1] cur = np.empty(m + 1, dtype=np.int64)
    cdef long long[::1] tmp
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def assign_nearest(const double[:, ::1] x, const double[:, ::1] centroids):
    cdef Py_ssize_t n = x.shape[0], k = centroids.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, c, j, best_c
    cdef double acc, diff, best
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    with nogil:
        for i in range(n):
            best = 0.0
            best_c = -1
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = x[i, j] - centroids[c, j]
                    acc = acc + diff * diff
                if best_c < 0 or acc < best:
                    best = acc
                    best_c = c
            labels[i] = best_c
            dist[i] = best
    return labels_arr, dist_arr


def centroid_sums(const double[:, ::1] x, const long long[::1] labels, Py_ssize_t k):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j, c
    sums_arr = np.zeros((k, d), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr
    with nogil:
        for i in range(n):
            c = labels[i]
            counts[c] += 1
            for j in range(d):
                sums[c, j] += x[i, j]
    return sums_arr, counts_arr
