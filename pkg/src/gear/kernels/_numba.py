"""JIT-compiled kernels. Imported only when numba is available and enabled."""
from __future__ import annotations

import numpy as np
from numba import njit

from gear.kernels import _numpy

# The annealer is a sequential loop; the interpreted reference is compiled as is.
anneal = njit(cache=True)(_numpy.anneal)


@njit(cache=True)
def nearest_centroid(x, centroids):
    n, d = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            acc = 0.0
            for j in range(d):
                t = x[i, j] - centroids[c, j]
                acc += t * t
            if acc < best:
                best = acc
                arg = c
        labels[i] = arg
        dist[i] = best
    return labels, dist


@njit(cache=True)
def centroid_update(x, labels, k):
    n, d = x.shape
    sums = np.zeros((k, d))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        c = labels[i]
        counts[c] += 1
        for j in range(d):
            sums[c, j] += x[i, j]
    for c in range(k):
        if counts[c] > 0:
            for j in range(d):
                sums[c, j] /= counts[c]
    return sums, counts
