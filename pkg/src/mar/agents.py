"""Reference agents: classification loss, cross-domain joint embedding loss.

Agents live in the embedding space, one per auxiliary identity. Labels are
0-based indices into the agent bank throughout the library.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from mar.errors import DimensionMismatch, LabelOutOfRange, MalformedFile
from mar.geometry import normalize_rows
from mar.softlabel import softmax_rows

AGT_MAGIC = b"MARAGT01"


@dataclass
class AgentBank:
    agents: np.ndarray
    constrained: bool = False

    @property
    def n_agents(self):
        return self.agents.shape[0]

    @property
    def dim(self):
        return self.agents.shape[1]

    def copy(self):
        return AgentBank(self.agents.copy(), self.constrained)


@dataclass
class AuxBatch:
    features: np.ndarray
    labels: np.ndarray


def init_agents(n_agents, dim, rng):
    return AgentBank(normalize_rows(rng.standard_normal((n_agents, dim))), constrained=False)


def _agent_array(agents):
    return np.asarray(getattr(agents, "agents", agents), dtype=np.float64)


def _check_labels(labels, n_agents):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_agents):
        raise LabelOutOfRange(f"labels must lie in [0, {n_agents}), got [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def al_loss(aux_embeddings, labels, agents, scale=1.0):
    """Mean cross-entropy of the scaled agent softmax at the true identity.

    Returns ``(loss, dL/dF, dL/dA)``.
    """
    F = np.asarray(aux_embeddings, dtype=np.float64)
    A = _agent_array(agents)
    if F.ndim != 2 or F.shape[1] != A.shape[1]:
        raise DimensionMismatch(f"embeddings {F.shape} vs agents {A.shape}")
    labels = _check_labels(labels, A.shape[0])
    n = len(F)
    logits = scale * (F @ A.T)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    G_logits = softmax_rows(logits)
    G_logits[rows, labels] -= 1.0
    G_logits *= scale / n
    return loss, G_logits @ A, G_logits.T @ F


def true_class_logits(aux_embeddings, labels, agents):
    """Unscaled inner products between each sample and its own agent."""
    F = np.asarray(aux_embeddings, dtype=np.float64)
    A = _agent_array(agents)
    return np.sum(F * A[np.asarray(labels)], axis=1)


def rj_loss(agents, target_embeddings, aux_embeddings, labels, m=1.0):
    """Hinge on target samples near each agent plus agent-to-own-samples pull.

    The two parts are averaged separately: hinge terms over the mined
    (agent, target) pairs, pulling terms over the auxiliary samples. An empty
    part contributes 0. Returns ``(loss, dL/dA, dL/dF_target, dL/dF_aux)``.
    """
    A = _agent_array(agents)
    X = np.asarray(target_embeddings, dtype=np.float64)
    Z = np.asarray(aux_embeddings, dtype=np.float64)
    labels = _check_labels(labels, A.shape[0])
    G_A = np.zeros_like(A)
    G_X = np.zeros_like(X)
    G_Z = np.zeros_like(Z)
    loss = 0.0

    if len(X):
        diff = A[:, None, :] - X[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        mined = sq < m
        n_mined = int(mined.sum())
        if n_mined:
            loss += float(np.sum(m - sq[mined])) / n_mined
            # d(m - |a - x|^2)/da = -2 (a - x); d/dx = +2 (a - x)
            W = mined / n_mined
            G_A += -2.0 * (W.sum(axis=1)[:, None] * A - W @ X)
            G_X += 2.0 * (W.T @ A - W.sum(axis=0)[:, None] * X)

    if len(Z):
        D = A[labels] - Z
        loss += float(np.sum(D * D)) / len(Z)
        coef = 2.0 * D / len(Z)
        np.add.at(G_A, labels, coef)
        G_Z -= coef
    return loss, G_A, G_X, G_Z


def ral_loss(al, rj, beta):
    return al + beta * rj


def renormalize_agents(agents):
    return AgentBank(normalize_rows(agents.agents), constrained=True)


def save_agents(path, bank):
    n, d = bank.agents.shape
    data = AGT_MAGIC + struct.pack("<2I", n, d) + np.ascontiguousarray(bank.agents, dtype="<f8").tobytes()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_agents(path, constrained=True):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != AGT_MAGIC or len(data) < 16:
        raise MalformedFile(f"{path}: bad agent checkpoint header")
    n, d = struct.unpack("<2I", data[8:16])
    if len(data) != 16 + 8 * n * d:
        raise MalformedFile(f"{path}: expected {16 + 8 * n * d} bytes, found {len(data)}")
    A = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(n, d)
    return AgentBank(A, constrained=constrained)
