"""Synthetic two-domain multi-view features, and the feature text format.

File layout::

    dim = 32
    domain = target
    count = 1440
    person_id,view_id,f1,...,f32
    ...

``person_id`` is ``-1`` when unknown. Floats are written with ``repr`` so a
save/load round trip is exact.
"""

import os
from dataclasses import dataclass, fields

import numpy as np

from mar.errors import DimensionMismatch, InvalidSpec, MalformedFile

DOMAINS = ("target", "aux")


@dataclass
class SyntheticSpec:
    n_persons_target: int = 60
    n_persons_aux: int = 150
    n_persons_test: int = 60
    views_target: int = 6
    images_per_person_per_view: int = 4
    d_in: int = 32
    view_transform_scale: float = 0.3
    view_bias_scale: float = 1.0
    noise_sigma: float = 0.05
    confuser_fraction: float = 0.3
    clue_dims: int = 3
    seed: int = 7

    def validate(self):
        if self.views_target < 2:
            raise InvalidSpec("views_target must be at least 2")
        if min(self.n_persons_target, self.n_persons_aux, self.images_per_person_per_view) < 1:
            raise InvalidSpec("person and image counts must be positive")
        if self.n_persons_test < 0:
            raise InvalidSpec("n_persons_test must be non-negative")
        if self.d_in < 2:
            raise InvalidSpec("d_in must be at least 2")
        if not 0.0 <= self.confuser_fraction <= 1.0:
            raise InvalidSpec("confuser_fraction must lie in [0, 1]")
        if not 0 < self.clue_dims < self.d_in:
            raise InvalidSpec("clue_dims must lie in (0, d_in)")
        if min(self.view_transform_scale, self.view_bias_scale, self.noise_sigma) < 0:
            raise InvalidSpec("scales must be non-negative")


SPEC_KEYS = tuple(f.name for f in fields(SyntheticSpec))


@dataclass
class FeatureDataset:
    features: np.ndarray
    person_ids: np.ndarray
    view_ids: np.ndarray
    domain: str = "target"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionMismatch(f"features must be 2-D, got shape {self.features.shape}")
        n = len(self.features)
        if len(self.person_ids) != n or len(self.view_ids) != n:
            raise DimensionMismatch("features, person_ids and view_ids must align")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def label_index(self):
        """Map person ids to contiguous agent indices. Returns ``(labels, ids)``."""
        ids, labels = np.unique(self.person_ids, return_inverse=True)
        return labels.astype(np.int64), ids

    def subset(self, idx):
        return FeatureDataset(self.features[idx], self.person_ids[idx], self.view_ids[idx], self.domain)

    def __eq__(self, other):
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (self.domain == other.domain
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.person_ids, other.person_ids)
                and np.array_equal(self.view_ids, other.view_ids))


def _unit_rows(rng, n, d):
    P = rng.standard_normal((n, d))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def _view_transforms(rng, spec):
    d = spec.d_in
    s = spec.view_transform_scale
    mats = [np.eye(d) + s * rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(spec.views_target)]
    biases = [spec.view_bias_scale * rng.standard_normal(d) / np.sqrt(d) for _ in range(spec.views_target)]
    return mats, biases


def _clue_basis(rng, d, clue_dims):
    Q, _ = np.linalg.qr(rng.standard_normal((d, clue_dims)))
    return Q


def _confusers(rng, protos, fraction, Q):
    """Replace a fraction of prototypes by near copies of another person.

    A copy keeps the base prototype outside the clue subspace spanned by
    ``Q`` and draws fresh coordinates inside it. Returns ``(protos, pairs)``.
    """
    n, d = protos.shape
    clue_dims = Q.shape[1]
    n_conf = int(round(fraction * n))
    if n_conf == 0 or n < 2:
        return protos, []
    order = rng.permutation(n)
    n_conf = min(n_conf, n // 2)
    bases, copies = order[:n_conf], order[n_conf:2 * n_conf]
    protos = protos.copy()
    pairs = []
    for b, c in zip(bases, copies):
        base = protos[b]
        inside = Q @ (Q.T @ base)
        fresh = Q @ rng.standard_normal(clue_dims) * np.linalg.norm(inside) / np.sqrt(clue_dims)
        v = base - inside + fresh
        protos[c] = v / np.linalg.norm(v)
        pairs.append((int(b), int(c)))
    return protos, pairs


def _render(rng, protos, ids, mats, biases, per_view, noise_sigma, domain):
    feats, pids, vids = [], [], []
    for p, pid in zip(protos, ids):
        for v, (M, bias) in enumerate(zip(mats, biases), start=1):
            clean = M @ p + bias
            for _ in range(per_view):
                feats.append(clean + noise_sigma * rng.standard_normal(len(p)))
                pids.append(pid)
                vids.append(v)
    return FeatureDataset(np.array(feats).reshape(-1, protos.shape[1]), np.array(pids), np.array(vids), domain)


def _streams(seed):
    names = ("target_views", "aux_views", "target_protos", "aux_protos", "test_protos",
             "target_noise", "aux_noise", "test_noise", "confusers", "test_confusers", "clues")
    return {name: np.random.default_rng([seed, k]) for k, name in enumerate(names)}


def _generate_all(spec):
    spec.validate()
    rng = _streams(spec.seed)
    t_mats, t_bias = _view_transforms(rng["target_views"], spec)
    a_mats, a_bias = _view_transforms(rng["aux_views"], spec)

    aux_protos = _unit_rows(rng["aux_protos"], spec.n_persons_aux, spec.d_in)
    tgt_protos = _unit_rows(rng["target_protos"], spec.n_persons_target, spec.d_in)
    Q = _clue_basis(rng["clues"], spec.d_in, spec.clue_dims)
    tgt_protos, tgt_pairs = _confusers(rng["confusers"], tgt_protos, spec.confuser_fraction, Q)
    test_protos = _unit_rows(rng["test_protos"], spec.n_persons_test, spec.d_in)
    test_protos, _ = _confusers(rng["test_confusers"], test_protos, spec.confuser_fraction, Q)

    n_a, n_t = spec.n_persons_aux, spec.n_persons_target
    aux_ids = np.arange(n_a)
    tgt_ids = n_a + np.arange(n_t)
    test_ids = n_a + n_t + np.arange(spec.n_persons_test)

    k = spec.images_per_person_per_view
    aux = _render(rng["aux_noise"], aux_protos, aux_ids, a_mats, a_bias, k, spec.noise_sigma, "aux")
    target = _render(rng["target_noise"], tgt_protos, tgt_ids, t_mats, t_bias, k, spec.noise_sigma, "target")
    test = _render(rng["test_noise"], test_protos, test_ids, t_mats, t_bias, k, spec.noise_sigma, "target")
    assert not set(aux_ids) & set(tgt_ids), "auxiliary and target identities overlap"
    confuser_ids = [(int(tgt_ids[b]), int(tgt_ids[c])) for b, c in tgt_pairs]
    return target, aux, test, confuser_ids


def generate(spec):
    """Return ``(target, aux)`` training datasets for ``spec``."""
    target, aux, _, _ = _generate_all(spec)
    return target, aux


def generate_heldout(spec):
    """Target-domain evaluation set: new identities seen through the same views."""
    return _generate_all(spec)[2]


def confuser_pairs(spec):
    """Person-id pairs ``(base, near_copy)`` among the target identities."""
    return _generate_all(spec)[3]


def save(path, dataset):
    lines = [f"dim = {dataset.dim}", f"domain = {dataset.domain}", f"count = {len(dataset)}"]
    for pid, vid, row in zip(dataset.person_ids.tolist(), dataset.view_ids.tolist(), dataset.features.tolist()):
        lines.append(",".join([str(pid), str(vid)] + [repr(x) for x in row]))
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _header_value(line, key, lineno):
    name, sep, value = line.partition("=")
    if not sep or name.strip() != key:
        raise MalformedFile(f"expected '{key} = ...', found {line!r}", lineno)
    return value.strip()


def load(path):
    with open(path) as fh:
        raw = fh.read().splitlines()
    if len(raw) < 3:
        raise MalformedFile(f"{path}: missing header", len(raw) + 1)
    try:
        dim = int(_header_value(raw[0], "dim", 1))
        count = int(_header_value(raw[2], "count", 3))
    except ValueError as exc:
        raise MalformedFile(f"{path}: bad header value ({exc})") from None
    domain = _header_value(raw[1], "domain", 2)
    if domain == "auxiliary":
        domain = "aux"
    if domain not in DOMAINS:
        raise MalformedFile(f"{path}: unknown domain {domain!r}", 2)
    records = [(k, line) for k, line in enumerate(raw[3:], start=4) if line.strip()]
    if len(records) != count:
        raise MalformedFile(f"{path}: header declares {count} records, found {len(records)}", len(raw))
    feats = np.empty((count, dim))
    pids = np.empty(count, dtype=np.int64)
    vids = np.empty(count, dtype=np.int64)
    for r, (lineno, line) in enumerate(records):
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise DimensionMismatch(f"{path}: line {lineno} has {len(parts) - 2} features, header says {dim}")
        try:
            pids[r] = int(parts[0])
            vids[r] = int(parts[1])
            feats[r] = [float(x) for x in parts[2:]]
        except ValueError as exc:
            raise MalformedFile(f"{path}: {exc}", lineno) from None
    if not np.all(np.isfinite(feats)):
        raise MalformedFile(f"{path}: non-finite feature value")
    return FeatureDataset(feats, pids, vids, domain)
