"""K-means with k-means++ seeding, plus silhouette analysis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import SingleCluster, TooFewSamples


def sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, C) squared Euclidean distances, clipped at zero."""
    d = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new center drawn with probability proportional to D^2."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = sq_distances(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers[i] = x[idx]
        closest = np.minimum(closest, sq_distances(x, centers[i:i + 1])[:, 0])
    return centers


def _update_centers(x, labels, centers):
    """Cluster means; an empty cluster takes the point farthest from its centroid."""
    k = centers.shape[0]
    new = np.empty_like(centers)
    counts = np.bincount(labels, minlength=k)
    dist = np.sum((x - centers[labels]) ** 2, axis=1)
    for j in range(k):
        if counts[j]:
            new[j] = x[labels == j].mean(axis=0)
        else:
            far = int(np.argmax(dist))
            new[j] = x[far]
            dist[far] = -1.0
    return new


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    k: int
    iterations: int = 0
    inertia_trace: list = field(default_factory=list)


def lloyd(x, centers, max_iter=300, tol=1e-6):
    trace = []
    labels = np.argmin(sq_distances(x, centers), axis=1)
    it = 0
    for it in range(1, max_iter + 1):
        new = _update_centers(x, labels, centers)
        shift = float(np.sqrt(np.sum((new - centers) ** 2)))
        centers = new
        d = sq_distances(x, centers)
        labels = np.argmin(d, axis=1)
        trace.append(float(np.sum(np.min(d, axis=1))))
        if shift < tol:
            break
    inertia = float(np.sum((x - centers[labels]) ** 2))
    return ClusterAssignment(labels, centers, inertia, centers.shape[0], it, trace)


def kmeans(features, k: int, restarts: int = 10, max_iter: int = 300, tol: float = 1e-6, seed: int = 0) -> ClusterAssignment:
    """Best-of-``restarts`` Lloyd clustering (lowest inertia, ties to the earliest restart)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or k < 1 or x.shape[0] < k:
        raise TooFewSamples(f"need at least k={k} samples, got {x.shape[0] if x.ndim else 0}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        res = lloyd(x, kmeans_plusplus(x, k, rng), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def silhouette(features, labels) -> float:
    """Mean silhouette coefficient; singletons score 0, and so does a = b = 0."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < 2:
        raise SingleCluster("silhouette needs at least two non-empty clusters")
    dist = cdist(x, x)
    member = labels[:, None] == ids[None, :]
    sums = dist @ member
    sizes = member.sum(axis=0)
    own = np.searchsorted(ids, labels)
    n = x.shape[0]
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())
