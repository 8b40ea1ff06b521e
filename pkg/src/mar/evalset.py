"""Cross-view retrieval metrics: CMC rank-k and mean average precision."""

from dataclasses import dataclass, field

import numpy as np

from mar.errors import DimensionMismatch, EmptyGallery, NoValidProbes


@dataclass
class LabeledEmbeddingSet:
    embeddings: np.ndarray
    person_ids: np.ndarray
    view_ids: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.person_ids = np.asarray(self.person_ids)
        self.view_ids = np.asarray(self.view_ids)
        if not len(self.embeddings) == len(self.person_ids) == len(self.view_ids):
            raise DimensionMismatch("embeddings, person_ids and view_ids must align")

    def __len__(self):
        return len(self.embeddings)

    def subset(self, idx):
        return LabeledEmbeddingSet(self.embeddings[idx], self.person_ids[idx], self.view_ids[idx])


@dataclass
class EvalResult:
    cmc: dict
    mAP: float
    n_valid: int
    n_skipped: int
    ap: np.ndarray = field(repr=False)

    def as_lines(self):
        lines = [f"rank{k} = {v:.6f}" for k, v in sorted(self.cmc.items())]
        lines += [f"mAP = {self.mAP:.6f}", f"probes = {self.n_valid}", f"skipped = {self.n_skipped}"]
        return lines


def _gallery_matrix(gallery):
    return gallery.embeddings if isinstance(gallery, LabeledEmbeddingSet) else np.asarray(gallery, dtype=np.float64)


def rank_gallery(probe, gallery):
    """Gallery indices by descending cosine similarity, ties by ascending index."""
    G = _gallery_matrix(gallery)
    if len(G) == 0:
        raise EmptyGallery("gallery is empty")
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != G.shape[1:]:
        raise DimensionMismatch(f"probe {probe.shape} vs gallery {G.shape}")
    return np.argsort(-(G @ probe), kind="stable")


def average_precision(hits):
    """AP of a ranked 0/1 relevance vector."""
    hits = np.asarray(hits, dtype=np.float64)
    n_rel = hits.sum()
    if n_rel == 0:
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision * hits) / n_rel)


def cmc_map(probes, gallery, ks=(1, 5, 10)):
    """Evaluate every probe against the gallery under the cross-view protocol.

    Gallery items sharing both person id and view id with the probe are
    removed before ranking. Probes left without any relevant item are skipped.
    """
    if len(gallery) == 0:
        raise EmptyGallery("gallery is empty")
    ks = sorted(set(int(k) for k in ks))
    sims = probes.embeddings @ gallery.embeddings.T
    first_hits = []
    aps = []
    skipped = 0
    for q in range(len(probes)):
        same_id = gallery.person_ids == probes.person_ids[q]
        keep = ~(same_id & (gallery.view_ids == probes.view_ids[q]))
        if not np.any(same_id & keep):
            skipped += 1
            continue
        cand = np.flatnonzero(keep)
        order = cand[np.argsort(-sims[q, cand], kind="stable")]
        hits = same_id[order]
        first_hits.append(int(np.argmax(hits)))
        aps.append(average_precision(hits))
    if not aps:
        raise NoValidProbes("no probe has a cross-view match in the gallery")
    first_hits = np.array(first_hits)
    cmc = {k: float(np.mean(first_hits < k)) for k in ks}
    aps = np.array(aps)
    return EvalResult(cmc=cmc, mAP=float(aps.mean()), n_valid=len(aps), n_skipped=skipped, ap=aps)


def query_gallery_split(person_ids, view_ids):
    """Probe = first sample of each (person, view); gallery = every sample."""
    seen = set()
    probes = []
    for i, key in enumerate(zip(np.asarray(person_ids).tolist(), np.asarray(view_ids).tolist())):
        if key not in seen:
            seen.add(key)
            probes.append(i)
    return np.array(probes, dtype=np.int64), np.arange(len(person_ids))
