"""Hypersphere primitives: normalization, cosine similarity, pair tables."""

from dataclasses import dataclass

import numpy as np

from mar.errors import BatchTooSmall, DegenerateVector, DimensionMismatch

EPS_NORM = 1e-12


def normalize(v):
    """Return ``v / ||v||`` as a float64 array.

    Raises DegenerateVector when the norm is at or below ``EPS_NORM``.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > EPS_NORM:
        raise DegenerateVector(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def normalize_rows(X):
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if X.shape[0] and not np.all(norms > EPS_NORM):
        bad = int(np.argmin(norms))
        raise DegenerateVector(f"row {bad} has norm {norms[bad]:g}")
    return X / norms[:, None]


def cosine(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"dimensions differ: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def pair_indices(n):
    """Row/column indices of the pairs (0,1), (0,2), ..., (n-2,n-1)."""
    return np.triu_indices(n, k=1)


@dataclass(frozen=True)
class SimilarityTable:
    """Values for each unordered pair i<j, in ``pair_indices`` order."""

    n: int
    values: np.ndarray

    @property
    def pairs(self):
        return pair_indices(self.n)

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        n = M.shape[0]
        if n < 2:
            raise BatchTooSmall(f"need at least 2 items, got {n}")
        i, j = pair_indices(n)
        return cls(n=n, values=M[i, j].copy())


def pairwise_similarities(batch):
    """Cosine similarity of every pair in ``batch`` (rows assumed unit norm)."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise BatchTooSmall(f"need at least 2 vectors, got shape {X.shape}")
    return SimilarityTable.from_matrix(X @ X.T)
