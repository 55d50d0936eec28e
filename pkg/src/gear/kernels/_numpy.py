"""Reference kernels in numpy / plain Python. Same contracts as ``_numba``."""
from __future__ import annotations

import math

import numpy as np


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of, and squared distance to, each row's nearest centroid (first on ties)."""
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(x.shape[0]), labels]


def centroid_update(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    out = np.zeros_like(sums)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out, counts


def anneal(indptr: np.ndarray, attrs: np.ndarray, cats: np.ndarray, n_attrs: int,
           toggles: np.ndarray, uniforms: np.ndarray, t0: float, alpha: float,
           min_size: int) -> tuple[np.ndarray, float, float, np.ndarray]:
    """Single-flip simulated annealing on the L1 category-imbalance energy.

    Starts from the full set. Returns (best_selected, best_energy,
    final_energy, best-energy trace per step).
    """
    n = indptr.shape[0] - 1
    diff = np.zeros(n_attrs, dtype=np.int64)
    for i in range(n):
        s = 1 if cats[i] == 0 else -1
        for j in range(indptr[i], indptr[i + 1]):
            diff[attrs[j]] += s
    energy = float(np.abs(diff).sum())
    selected = np.ones(n, dtype=np.bool_)
    size = n
    best = selected.copy()
    best_e = energy
    trace = np.empty(toggles.shape[0])
    temp = t0
    for step in range(toggles.shape[0]):
        i = toggles[step]
        removing = selected[i]
        if not (removing and size <= min_size):
            s = 1 if cats[i] == 0 else -1
            if removing:
                s = -s
            delta = 0
            for j in range(indptr[i], indptr[i + 1]):
                a = attrs[j]
                old = diff[a]
                diff[a] = old + s
                delta += abs(old + s) - abs(old)
            if delta <= 0 or (temp > 0.0 and uniforms[step] < math.exp(-delta / temp)):
                selected[i] = not removing
                size += -1 if removing else 1
                energy += delta
                if energy < best_e:
                    best_e = energy
                    best[:] = selected
            else:
                for j in range(indptr[i], indptr[i + 1]):
                    diff[attrs[j]] -= s
        trace[step] = best_e
        temp *= alpha
    return best, best_e, energy, trace
