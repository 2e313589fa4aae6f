# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sifting kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def dbscan_labels(indptr_in, indices_in, Py_ssize_t min_pts):
    cdef cnp.int64_t[::1] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef cnp.int64_t[::1] indices = np.ascontiguousarray(indices_in, dtype=np.int64)
    cdef Py_ssize_t n = indptr.shape[0] - 1
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef cnp.int64_t[::1] queue = np.empty(max(n, 1), dtype=np.int64)
    cdef Py_ssize_t i, p, q, k, head, tail
    cdef cnp.int64_t cluster = 0
    for i in range(n):
        if labels[i] != -1 or indptr[i + 1] - indptr[i] < min_pts:
            continue
        labels[i] = cluster
        head = 0
        tail = 0
        queue[tail] = i
        tail += 1
        while head < tail:
            p = queue[head]
            head += 1
            if indptr[p + 1] - indptr[p] < min_pts:
                continue
            for k in range(indptr[p], indptr[p + 1]):
                q = indices[k]
                if labels[q] == -1:
                    labels[q] = cluster
                    queue[tail] = q
                    tail += 1
        cluster += 1
    return labels_arr


def consistent_counts(neighbors_in, same_class_in):
    cdef cnp.int64_t[:, :, ::1] nb = np.ascontiguousarray(neighbors_in, dtype=np.int64)
    cdef cnp.uint8_t[::1] same = np.ascontiguousarray(same_class_in, dtype=np.uint8)
    cdef Py_ssize_t n_layers = nb.shape[0], n = nb.shape[1], m = nb.shape[2]
    cdef Py_ssize_t i, l, j
    cdef cnp.int64_t q, c
    cdef cnp.int32_t[::1] hits = np.zeros(same.shape[0], dtype=np.int32)
    out_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    for i in range(n):
        for l in range(n_layers):
            for j in range(m):
                hits[nb[l, i, j]] += 1
        c = 0
        for j in range(m):
            q = nb[0, i, j]
            if hits[q] == n_layers and same[q]:
                c += 1
        out[i] = c
        for l in range(n_layers):
            for j in range(m):
                hits[nb[l, i, j]] = 0
    return out_arr
