"""Lloyd's K-means with random restarts and medoid extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    medoids: np.ndarray  # row index into the input, one per cluster
    wcss: float
    wcss_trace: list[float] = field(default_factory=list)
    restart_wcss: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _lloyd(points, init, max_iter):
    centroids = init.copy()
    assign = None
    trace = []
    for _ in range(max_iter):
        d = _sq_dists(points, centroids)
        new = d.argmin(1)
        trace.append(float(d[np.arange(len(points)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centroids)):
            members = points[assign == j]
            if len(members):
                centroids[j] = members.mean(0)
            else:
                # re-seed an empty cluster at the currently worst-fit point
                far = d[np.arange(len(points)), assign].argmax()
                centroids[j] = points[far]
    d = _sq_dists(points, centroids)
    assign = d.argmin(1)
    wcss = float(d[np.arange(len(points)), assign].sum())
    trace.append(wcss)
    return centroids, assign, wcss, trace


def kmeans(points, k: int, rng: np.random.Generator, restarts: int = 10, max_iter: int = 300) -> KMeansResult:
    """Best-of-``restarts`` Lloyd clustering by within-cluster sum of squares.

    Initial centroids are ``k`` distinct input rows chosen uniformly. The
    medoid of each cluster is the member closest to its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1 or n < k:
        raise ValueError(f"need at least k={k} points, got {n}")

    best = None
    restart_wcss = []
    for _ in range(max(1, restarts)):
        init = points[rng.choice(n, size=k, replace=False)]
        cand = _lloyd(points, init, max_iter)
        restart_wcss.append(cand[2])
        if best is None or cand[2] < best[2]:
            best = cand
    centroids, assign, wcss, trace = best

    medoids = np.empty(k, dtype=np.int64)
    for j in range(k):
        members = np.flatnonzero(assign == j)
        if len(members) == 0:
            medoids[j] = -1
            continue
        dist = ((points[members] - centroids[j]) ** 2).sum(1)
        medoids[j] = members[dist.argmin()]
    return KMeansResult(centroids, assign, medoids, wcss, trace, restart_wcss)


def assign_to_centroids(points, centroids) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return _sq_dists(points, np.asarray(centroids, dtype=np.float64)).argmin(1)
