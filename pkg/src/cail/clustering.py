"""k-means with k-means++ seeding, used to pre-cluster steps into template groups."""
from __future__ import annotations

import numpy as np


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    """Lloyd iterations until assignments stop changing; returns (centers, labels)."""
    x = np.asarray(x, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f"fewer than {k} distinct points to cluster")
    centers = kmeans_pp_init(x, k, rng)
    labels = assign(x, centers)
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # empty cluster: move it to the worst-served point
                far = ((x - centers[labels]) ** 2).sum(1).argmax()
                centers[j] = x[far]
        new = assign(x, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return centers, labels
