"""Soft multilabels, their agreement, and the cross-view consistency loss.

A soft multilabel is the softmax of scaled agent/embedding inner products.
The consistency loss compares per-view mean/std of the log-labels against the
statistics pooled over all views.
"""

from dataclasses import dataclass, field

import numpy as np

from mar.errors import DimensionMismatch, EmptyAgentBank, NoValidViews
from mar.geometry import SimilarityTable

EPS_LOG = 1e-12


def _agent_matrix(agents):
    A = np.asarray(getattr(agents, "agents", agents), dtype=np.float64)
    if A.ndim != 2 or A.shape[0] == 0:
        raise EmptyAgentBank("agent bank is empty")
    return A


def softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    expZ = np.exp(Z)
    return expZ / expZ.sum(axis=1, keepdims=True)


def soft_multilabels(F, agents, scale=1.0):
    """Row-wise soft multilabels for embeddings ``F`` (n x d)."""
    A = _agent_matrix(agents)
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != A.shape[1]:
        raise DimensionMismatch(f"embeddings {F.shape} vs agents {A.shape}")
    return softmax_rows(scale * (F @ A.T))


def soft_multilabel(f_x, agents, scale=1.0):
    f_x = np.asarray(f_x, dtype=np.float64)
    if f_x.ndim != 1:
        raise DimensionMismatch(f"expected a vector, got shape {f_x.shape}")
    return soft_multilabels(f_x[None, :], agents, scale)[0]


def soft_multilabels_backward(Y, F, agents, scale, GY):
    """Given ``dL/dY`` return ``(dL/dF, dL/dA)`` through softmax and logits."""
    A = _agent_matrix(agents)
    G_logits = Y * (GY - np.sum(GY * Y, axis=1, keepdims=True))
    G_logits *= scale
    return G_logits @ A, G_logits.T @ F


def agreement(y_i, y_j):
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if y_i.shape != y_j.shape:
        raise DimensionMismatch(f"label lengths differ: {y_i.shape} vs {y_j.shape}")
    return float(np.minimum(y_i, y_j).sum())


def agreement_table(Y, chunk=64):
    """Agreement of every pair i<j, as a ``SimilarityTable``."""
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    M = np.empty((n, n))
    for start in range(0, n, chunk):
        block = Y[start:start + chunk]
        M[start:start + chunk] = np.minimum(block[:, None, :], Y[None, :, :]).sum(axis=2)
    return SimilarityTable.from_matrix(M)


@dataclass
class ViewStats:
    """Per-view and pooled mean/std of log-labels.

    ``logs`` and ``rows`` keep what ``cml_loss`` needs to route gradients
    back to individual samples; ``rows`` indexes the samples that
    contributed (views with fewer than two samples are dropped).
    """

    per_view: dict
    mu: np.ndarray
    sigma: np.ndarray
    counts: dict
    logs: np.ndarray = field(repr=False)
    views: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)


def view_stats(Y, views):
    Y = np.asarray(Y, dtype=np.float64)
    views = np.asarray(views)
    if len(views) != len(Y):
        raise DimensionMismatch(f"{len(Y)} labels but {len(views)} view ids")
    logs = np.log(Y + EPS_LOG)
    per_view = {}
    counts = {}
    keep = []
    for v in sorted(set(views.tolist())):
        idx = np.flatnonzero(views == v)
        if len(idx) < 2:
            continue
        L = logs[idx]
        per_view[v] = (L.mean(axis=0), L.std(axis=0))
        counts[v] = len(idx)
        keep.append(idx)
    if not keep:
        raise NoValidViews("no camera view has at least two samples")
    rows = np.sort(np.concatenate(keep))
    pooled = logs[rows]
    return ViewStats(per_view=per_view, mu=pooled.mean(axis=0), sigma=pooled.std(axis=0),
                     counts=counts, logs=logs, views=views, rows=rows)


def _safe_div(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def cml_loss(stats):
    """Sum over views of squared distance between (mu_v, sigma_v) and (mu, sigma).

    Returns ``(loss, G)`` where ``G`` has the shape of ``stats.logs`` and holds
    dL/d(log-label); rows that did not contribute are zero. A zero std has
    zero subgradient.
    """
    mu, sigma = stats.mu, stats.sigma
    n_total = len(stats.rows)
    loss = 0.0
    G = np.zeros_like(stats.logs)
    g_mu = np.zeros_like(mu)
    g_sigma = np.zeros_like(sigma)
    for v, (mu_v, sigma_v) in stats.per_view.items():
        d_mu = mu_v - mu
        d_sigma = sigma_v - sigma
        loss += float(d_mu @ d_mu + d_sigma @ d_sigma)
        idx = np.flatnonzero(stats.views == v)
        n_v = len(idx)
        G[idx] += 2.0 * d_mu / n_v
        G[idx] += 2.0 * d_sigma * _safe_div(stats.logs[idx] - mu_v, n_v * sigma_v)
        g_mu -= 2.0 * d_mu
        g_sigma -= 2.0 * d_sigma
    rows = stats.rows
    G[rows] += g_mu / n_total
    G[rows] += g_sigma * _safe_div(stats.logs[rows] - mu, n_total * sigma)
    return loss, G


def cml_loss_from_labels(Y, views):
    """Loss and dL/dY for soft multilabels ``Y`` grouped by ``views``."""
    stats = view_stats(Y, views)
    loss, G_log = cml_loss(stats)
    return loss, G_log / (np.asarray(Y) + EPS_LOG)
