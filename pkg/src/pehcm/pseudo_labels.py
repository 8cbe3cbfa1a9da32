"""Pseudo-fine labels from clustering a per-coarse-class feature memory.

Each coarse class keeps a ring buffer of its most recent unit-normalized
projector features. Spherical k-means (cosine-similarity Lloyd iterations
with renormalized centroids) splits every buffer into clusters, and batch
samples are labeled with the index of the most similar centroid inside
their own coarse class. Clustering never mixes features across coarse
classes.
"""

from collections import deque

import numpy as np


class MemoryBank:
    """Ring buffers of recent unit features, one per known coarse class."""

    def __init__(self, classes, capacity):
        capacity = int(capacity)
        if capacity < 1:
            raise ValueError("memory capacity must be at least 1")
        self.capacity = capacity
        self._buffers = {int(c): deque(maxlen=capacity) for c in classes}
        if not self._buffers:
            raise ValueError("memory bank needs at least one coarse class")

    def classes(self):
        return sorted(self._buffers)

    def count(self, cls):
        return len(self._buffers[int(cls)])

    def counts(self):
        return {c: len(buf) for c, buf in sorted(self._buffers.items())}

    def push(self, features, coarse):
        """Normalize and append a batch of features to their class buffers."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        coarse = np.asarray(coarse, dtype=np.int64).reshape(-1)
        if len(coarse) != len(features):
            raise ValueError("one coarse label per feature row is required")
        norms = np.linalg.norm(features, axis=1)
        if not np.all(norms > 0.0):
            raise ValueError("cannot store zero-norm features")
        unit = features / norms[:, None]
        for row, cls in zip(unit, coarse):
            cls = int(cls)
            if cls not in self._buffers:
                raise ValueError(f"unknown coarse class {cls}")
            self._buffers[cls].append(row)

    def features_for(self, cls):
        buf = self._buffers[int(cls)]
        if not buf:
            return np.zeros((0, 0))
        return np.stack(buf)


class ClusterModel:
    """Per-class unit centroids; a class without enough samples has None."""

    def __init__(self, centroids, k_clusters):
        self.centroids = centroids
        self.k_clusters = int(k_clusters)

    def has_model(self, cls):
        return self.centroids.get(int(cls)) is not None


def _normalize_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _kmeans_pp(x, k, rng):
    """Seed k centroids from the data, weighting by squared cosine distance."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    dist = np.clip(1.0 - x @ x[chosen[0]], 0.0, None)
    for _ in range(1, k):
        weights = dist * dist
        total = weights.sum()
        if total <= 1e-12:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weights / total))
        chosen.append(idx)
        dist = np.minimum(dist, np.clip(1.0 - x @ x[idx], 0.0, None))
    return x[chosen].copy()


def _lloyd(x, k, rng, max_iter):
    """One spherical k-means run; returns (centroids, assignment, objective)."""
    centroids = _kmeans_pp(x, k, rng)
    reseeded = np.zeros(k, dtype=bool)
    assign = None
    for _ in range(max_iter):
        sims = x @ centroids.T
        new_assign = sims.argmax(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 1e-12:
                    centroids[j] = mean / norm
            elif not reseeded[j]:
                # One-shot re-seed from the point farthest from its centroid.
                far = np.argmax(1.0 - sims[np.arange(len(x)), assign])
                centroids[j] = x[far]
                reseeded[j] = True
    sims = x @ centroids.T
    assign = sims.argmax(axis=1)
    objective = float(sims[np.arange(len(x)), assign].sum())
    return centroids, assign, objective


def recluster(bank, k_clusters, seed, n_init=4, max_iter=100):
    """Cluster every coarse-class buffer independently.

    Runs n_init seeded restarts per class and keeps the best objective;
    deterministic for fixed bank contents and seed. Classes with fewer than
    k_clusters stored samples get no model.
    """
    k_clusters = int(k_clusters)
    if k_clusters < 1:
        raise ValueError("k_clusters must be at least 1")
    rng = np.random.default_rng(seed)
    centroids = {}
    for cls in bank.classes():
        x = bank.features_for(cls)
        if len(x) < k_clusters:
            centroids[cls] = None
            continue
        best = None
        for _ in range(max(1, int(n_init))):
            cands, _, objective = _lloyd(x, k_clusters, rng, max_iter)
            if best is None or objective > best[0]:
                best = (objective, cands)
        centroids[cls] = best[1]
    return ClusterModel(centroids, k_clusters)


def assign_pseudo(features, coarse, model):
    """Index of the most similar centroid within each sample's own coarse
    class; ties go to the lowest index, classes without a model give -1."""
    features = np.asarray(features, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.int64).reshape(-1)
    norms = np.linalg.norm(features, axis=1)
    if not np.all(norms > 0.0):
        raise ValueError("cannot assign pseudo-labels to zero-norm features")
    unit = features / norms[:, None]
    out = np.full(len(features), -1, dtype=np.int64)
    for cls in np.unique(coarse):
        cents = model.centroids.get(int(cls))
        if cents is None:
            continue
        rows = coarse == cls
        out[rows] = (unit[rows] @ cents.T).argmax(axis=1)
    return out
