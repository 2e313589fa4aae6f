"""Pure-Python reference versions of the compiled sifting kernels."""

from collections import deque

import numpy as np


def dbscan_labels(indptr, indices, min_pts):
    """Cluster labels from precomputed eps-neighbourhoods in CSR form.

    ``indices[indptr[i]:indptr[i + 1]]`` lists the points within eps of ``i``
    (itself included).  Points are visited in index order; noise is -1.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indptr) - 1
    sizes = np.diff(indptr)
    core = sizes >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in indices[indptr[p]:indptr[p + 1]]:
                if labels[q] == -1:
                    labels[q] = cluster
                    queue.append(q)
        cluster += 1
    return labels


def consistent_counts(neighbors, same_class):
    """For each row, count ids present in every layer's neighbour list and flagged in ``same_class``.

    ``neighbors`` has shape (L, n, m); entries within one (layer, row) are distinct.
    """
    neighbors = np.asarray(neighbors, dtype=np.int64)
    same_class = np.asarray(same_class, dtype=bool)
    n_layers, n, _ = neighbors.shape
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        common = set(neighbors[0, i].tolist())
        for l in range(1, n_layers):
            common.intersection_update(neighbors[l, i].tolist())
        out[i] = sum(1 for j in common if same_class[j])
    return out
