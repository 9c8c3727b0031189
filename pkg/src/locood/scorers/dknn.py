"""Deep k-nearest-neighbour scoring on L2-normalised embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from ..kernels import sorted_knn_distances


@dataclass(frozen=True)
class DknnIndex:
    vectors: np.ndarray
    k: int

    @property
    def dim(self):
        return self.vectors.shape[1]


def l2_normalize(z):
    """Row-wise unit normalisation; all-zero rows stay zero."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)


def fit_dknn(embeddings, k):
    vectors = l2_normalize(embeddings)
    if not 1 <= k <= len(vectors):
        raise ConfigError(f"k={k} outside [1, {len(vectors)}]")
    vectors.setflags(write=False)
    return DknnIndex(vectors=vectors, k=int(k))


def _queries(index, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    q = l2_normalize(z)
    if q.shape[1] != index.dim:
        raise ShapeError(f"embedding width {q.shape[1]} != index width {index.dim}")
    return q, single


def score_dknn(index, z, k=None):
    """Distance from the normalised query to its k-th nearest stored vector."""
    k = index.k if k is None else k
    if not 1 <= k <= len(index.vectors):
        raise ConfigError(f"k={k} outside [1, {len(index.vectors)}]")
    q, single = _queries(index, z)
    d = sorted_knn_distances(q, index.vectors, k)[:, k - 1]
    return float(d[0]) if single else d


def knn_distance_table(index, z, kmax):
    """``(n_queries, kmax)`` ascending neighbour distances, for sweeping k."""
    q, _ = _queries(index, z)
    return sorted_knn_distances(q, index.vectors, kmax)
