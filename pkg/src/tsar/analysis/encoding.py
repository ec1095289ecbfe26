"""Do regulator encodings cluster by class or by task?"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, D)
    explained_variance: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components.T

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components + self.mean


def pca(x: np.ndarray, dims: int, tol: float = 1e-10) -> PCA:
    """Principal axes via SVD; drops (with a warning) directions of ~zero variance."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2 / max(len(x) - 1, 1)
    rank = int((s > tol * max(s.max(initial=0.0), 1.0)).sum())
    k = min(dims, rank)
    if k < dims:
        warnings.warn(f"covariance has rank {rank}; using {k} of {dims} requested components", stacklevel=2)
    return PCA(mean, vt[:k], var[:k])


def knn_loo_accuracy(z: np.ndarray, labels: np.ndarray, k: int = 5) -> float:
    """Leave-one-out k-nearest-neighbour label accuracy (Euclidean).

    Vote ties go to the label of the nearest tied neighbour.
    """
    labels = np.asarray(labels)
    d = cdist(z, z)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    correct = 0
    for i, row in enumerate(nn):
        votes = labels[row]
        vals, counts = np.unique(votes, return_counts=True)
        best = vals[counts == counts.max()]
        pred = next(v for v in votes if v in best)
        correct += pred == labels[i]
    return correct / len(labels)


@dataclass
class ClusterCheck:
    accuracy: float
    components: int
    explained_variance: np.ndarray
    chance: float


def encoding_cluster_check(encodings, labels, reduce_dims: int = 50, k: int = 5) -> ClusterCheck:
    """PCA to ``reduce_dims`` then leave-one-out KNN on the labels."""
    x = np.asarray(encodings, dtype=np.float64).reshape(len(encodings), -1)
    labels = np.asarray(labels)
    vals, counts = np.unique(labels, return_counts=True)
    if counts.min() < k + 1:
        raise ValueError(f"every label needs at least k+1={k + 1} encodings; smallest has {counts.min()}")
    model = pca(x, reduce_dims)
    acc = knn_loo_accuracy(model.transform(x), labels, k)
    return ClusterCheck(acc, len(model.components), model.explained_variance, 1.0 / len(vals))


def encoding_projection(encodings, colour_values, dims: int = 2) -> np.ndarray:
    """Rows of (pc1, pc2, ..., colour) for scatter plots coloured by e.g. mean regulation."""
    x = np.asarray(encodings, dtype=np.float64).reshape(len(encodings), -1)
    z = pca(x, dims).transform(x)
    return np.column_stack([z, np.asarray(colour_values, dtype=np.float64)])
