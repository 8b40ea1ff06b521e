"""Soft multilabel-guided hard negative mining within a batch.

The top ``rank`` most similar pairs are the "similar pairs". Each is a
positive if its agreement reaches the agreement threshold, otherwise a hard
negative. Sorting is on (value descending, pair index ascending) so exactly
``rank`` pairs are selected even with ties.
"""

import math
from dataclasses import dataclass

import numpy as np

from mar.errors import BatchTooSmall, DimensionMismatch, EmptyMiningSet
from mar.geometry import pair_indices


@dataclass(frozen=True)
class MiningThresholds:
    S: float
    T: float
    p: float
    m_batch: int
    rank: int


@dataclass(frozen=True)
class MiningSets:
    """Pair index arrays (rows of ``(i, j)``) for positives and hard negatives."""

    positives: np.ndarray
    hard_negatives: np.ndarray
    thresholds: MiningThresholds
    # positions into the pair table, useful for reports
    positive_slots: np.ndarray
    negative_slots: np.ndarray


def mining_rank(p, m_batch):
    """Round ``p * m_batch`` half-up, with a floor of 1."""
    return max(1, min(m_batch, math.floor(p * m_batch + 0.5)))


def _descending_order(values):
    # stable sort on -values keeps ascending pair index among ties
    return np.argsort(-np.asarray(values), kind="stable")


def _check_tables(sims, agreements=None):
    if sims.n < 2:
        raise BatchTooSmall(f"need at least 2 items, got {sims.n}")
    if agreements is not None and agreements.n != sims.n:
        raise DimensionMismatch(f"tables over {sims.n} and {agreements.n} items")


def compute_thresholds(sims, agreements, p):
    _check_tables(sims, agreements)
    if not 0 < p <= 1:
        raise ValueError(f"mining ratio must be in (0, 1], got {p}")
    m_batch = len(sims.values)
    rank = mining_rank(p, m_batch)
    S = float(sims.values[_descending_order(sims.values)[rank - 1]])
    T = float(agreements.values[_descending_order(agreements.values)[rank - 1]])
    return MiningThresholds(S=S, T=T, p=p, m_batch=m_batch, rank=rank)


def similar_slots(sims, rank):
    """Positions of the ``rank`` most similar pairs, most similar first."""
    return _descending_order(sims.values)[:rank]


def _as_pairs(sims, slots):
    i, j = pair_indices(sims.n)
    return np.stack([i[slots], j[slots]], axis=1) if len(slots) else np.empty((0, 2), dtype=np.int64)


def build_sets(sims, agreements, thresholds):
    _check_tables(sims, agreements)
    slots = similar_slots(sims, thresholds.rank)
    is_pos = agreements.values[slots] >= thresholds.T
    pos, neg = slots[is_pos], slots[~is_pos]
    return MiningSets(positives=_as_pairs(sims, pos), hard_negatives=_as_pairs(sims, neg),
                      thresholds=thresholds, positive_slots=pos, negative_slots=neg)


def mine(sims, agreements, p):
    return build_sets(sims, agreements, compute_thresholds(sims, agreements, p))


def baseline_sets(sims, p):
    """Feature-similarity-guided split of the similar pairs.

    The upper half by similarity (the middle one too, for odd counts) becomes
    P and the rest N; ``thresholds.T`` holds the lowest positive similarity.
    """
    _check_tables(sims)
    if not 0 < p <= 1:
        raise ValueError(f"mining ratio must be in (0, 1], got {p}")
    m_batch = len(sims.values)
    rank = mining_rank(p, m_batch)
    slots = similar_slots(sims, rank)
    n_pos = (rank + 1) // 2
    pos, neg = slots[:n_pos], slots[n_pos:]
    thresholds = MiningThresholds(S=float(sims.values[slots[-1]]), T=float(sims.values[pos[-1]]),
                                  p=p, m_batch=m_batch, rank=rank)
    return MiningSets(positives=_as_pairs(sims, pos), hard_negatives=_as_pairs(sims, neg),
                      thresholds=thresholds, positive_slots=pos, negative_slots=neg)


def _pair_kernel(E, pairs):
    D = E[pairs[:, 0]] - E[pairs[:, 1]]
    return D, np.exp(-np.sum(D * D, axis=1))


def mdl_loss(sets, embeddings):
    """``-log(Pbar / (Pbar + Nbar))`` with Gaussian-kernel pair affinities.

    Returns ``(loss, dL/dE)``. Raises EmptyMiningSet if P or N is empty.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    if len(sets.positives) == 0 or len(sets.hard_negatives) == 0:
        raise EmptyMiningSet(f"|P|={len(sets.positives)}, |N|={len(sets.hard_negatives)}")
    D_p, k_p = _pair_kernel(E, sets.positives)
    D_n, k_n = _pair_kernel(E, sets.hard_negatives)
    P_bar, N_bar = k_p.mean(), k_n.mean()
    total = P_bar + N_bar
    loss = float(np.log(total) - np.log(P_bar))
    g_P = -N_bar / (P_bar * total)
    g_N = 1.0 / total
    G = np.zeros_like(E)
    for pairs, D, k, g_bar in ((sets.positives, D_p, k_p, g_P), (sets.hard_negatives, D_n, k_n, g_N)):
        # d exp(-|fi - fj|^2) / d fi = -2 (fi - fj) exp(.)
        coef = (g_bar / len(k)) * (-2.0 * k)[:, None] * D
        np.add.at(G, pairs[:, 0], coef)
        np.add.at(G, pairs[:, 1], -coef)
    return loss, G
