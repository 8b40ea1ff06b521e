"""Two-phase training of the encoder and reference agents.

Phase one fits the auxiliary classification loss on unnormalized embeddings
and free agents, tracking the mean true-class logit over the last epoch.
Phase two projects everything onto the sphere, multiplies agent logits by
that mean, and minimizes the full objective::

    mdl + lambda1 * cml + lambda2 * (al + beta * rj)
"""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from mar import encoder as enc
from mar.agents import AgentBank, al_loss, renormalize_agents, rj_loss, true_class_logits
from mar.errors import (EmptyDataset, EmptyMiningSet, InvalidScale, NoPretrainStats, NonFiniteLoss,
                        NoValidViews)
from mar.evalset import LabeledEmbeddingSet, cmc_map, query_gallery_split
from mar.geometry import normalize_rows, pairwise_similarities
from mar.mining import baseline_sets, mdl_loss, mine
from mar.softlabel import agreement_table, cml_loss_from_labels, soft_multilabels, soft_multilabels_backward

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
CONSTRAINED = "constrained"
_PHASE_CODE = {PRETRAIN: 1, CONSTRAINED: 2}


@dataclass
class TrainConfig:
    lambda1: float = 0.0002
    lambda2: float = 50.0
    beta: float = 0.2
    p: float = 0.005
    m: float = 1.0
    batch_size: int = 368
    learning_rate: float = 0.2
    pretrain_learning_rate: float = 2.0
    pretrain_epochs: int = 30
    train_epochs: int = 200
    seed: int = 7
    d_in: int = 32
    d_h: int = 0
    d_out: int = 16
    depth: int = 1
    # "soft" mines with label agreement, "feature" is the similarity-split baseline
    mining: str = "soft"
    # global gradient-norm cap; 0 disables
    clip_norm: float = 10.0
    # > 0 overrides the logit scale estimated during pretraining
    scale: float = 0.0
    threads: int = 1
    eval_every: int = 1

    def validate(self):
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("batch_size must be even and at least 4")
        if self.learning_rate < 0 or self.pretrain_learning_rate < 0:
            raise ValueError("learning rates must be non-negative")
        if min(self.lambda1, self.lambda2, self.beta) < 0 or not 0 < self.p <= 1:
            raise ValueError("lambda1, lambda2, beta must be >= 0 and p must lie in (0, 1]")
        if self.m <= 0:
            raise ValueError("margin m must be positive")
        if self.depth not in (1, 2) or (self.depth == 2 and self.d_h <= 0):
            raise ValueError("depth must be 1, or 2 with d_h > 0")
        if self.mining not in ("soft", "feature"):
            raise ValueError(f"unknown mining mode {self.mining!r}")
        return self

    @property
    def half(self):
        return self.batch_size // 2


CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))


@dataclass
class TrainState:
    encoder: enc.EncoderParams
    agents: AgentBank
    scale: float = 1.0
    phase: str = PRETRAIN
    epoch: int = 0
    step: int = 0
    logit_sum: float = 0.0
    logit_count: int = 0
    act_norm_sum: float = 0.0

    @property
    def constrained(self):
        return self.phase == CONSTRAINED

    def copy(self):
        return replace(self, encoder=self.encoder.copy(), agents=self.agents.copy())


@dataclass
class LossBreakdown:
    mdl: float = 0.0
    cml: float = 0.0
    al: float = 0.0
    rj: float = 0.0
    total: float = 0.0
    n_pos: int = 0
    n_neg: int = 0
    norm_error: float = 0.0


@dataclass
class Batch:
    target_x: np.ndarray
    target_views: np.ndarray
    aux_x: np.ndarray
    aux_labels: np.ndarray
    target_idx: np.ndarray = field(repr=False)
    aux_idx: np.ndarray = field(repr=False)


def init_state(config, n_agents):
    rng = np.random.default_rng([config.seed, 0])
    params = enc.init_params(config.d_in, config.d_out, rng, depth=config.depth, d_h=config.d_h)
    agents = AgentBank(normalize_rows(rng.standard_normal((n_agents, config.d_out))), constrained=False)
    return TrainState(encoder=params, agents=agents)


def _draw(rng, n, k):
    return rng.choice(n, size=k, replace=n < k)


def compose_batch(config, step, target, aux, phase=CONSTRAINED):
    """Half target samples, half auxiliary samples; a pure function of (seed, phase, step)."""
    if len(target) == 0 or len(aux) == 0:
        raise EmptyDataset("both target and auxiliary datasets must be non-empty")
    rng = np.random.default_rng([config.seed, _PHASE_CODE[phase], step])
    t_idx = _draw(rng, len(target), config.half)
    a_idx = _draw(rng, len(aux), config.half)
    labels, _ = aux.label_index()
    return Batch(target_x=target.features[t_idx], target_views=target.view_ids[t_idx],
                 aux_x=aux.features[a_idx], aux_labels=labels[a_idx], target_idx=t_idx, aux_idx=a_idx)


def steps_per_epoch(config, n_target):
    return max(1, math.ceil(n_target / config.half))


def _clip(grads, agent_grad, clip_norm):
    if clip_norm <= 0:
        return grads, agent_grad
    sq = sum(float(np.sum(t * t)) for t in grads.tensors()) + float(np.sum(agent_grad * agent_grad))
    norm = math.sqrt(sq)
    if norm <= clip_norm:
        return grads, agent_grad
    factor = clip_norm / norm
    for name in grads.names():
        setattr(grads, name, getattr(grads, name) * factor)
    return grads, agent_grad * factor


def _sgd(params, grads, lr):
    out = params.copy()
    for name in params.names():
        setattr(out, name, getattr(params, name) - lr * getattr(grads, name))
    return out


def _check_finite(value, what):
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{what} became non-finite")


def pretrain_step(state, batch, config):
    """One SGD step on the auxiliary classification loss, no norm constraint."""
    if state.phase != PRETRAIN:
        raise ValueError("pretrain_step called outside the pretraining phase")
    F, cache = enc.forward_batch(state.encoder, batch.aux_x, constrained=False)
    loss, G_F, G_A = al_loss(F, batch.aux_labels, state.agents, scale=1.0)
    _check_finite(loss, "pretraining loss")
    logits = true_class_logits(F, batch.aux_labels, state.agents)
    grads = enc.backward_batch(state.encoder, cache, G_F)
    grads, G_A = _clip(grads, G_A, config.clip_norm)
    lr = config.pretrain_learning_rate
    new = replace(state, encoder=_sgd(state.encoder, grads, lr),
                  agents=AgentBank(state.agents.agents - lr * G_A, constrained=False),
                  step=state.step + 1, logit_sum=state.logit_sum + float(logits.sum()),
                  logit_count=state.logit_count + len(logits),
                  act_norm_sum=state.act_norm_sum + float(np.linalg.norm(F, axis=1).sum()))
    return new, LossBreakdown(al=loss, total=loss)


def freeze_scale(state, override=0.0):
    """Fix the logit scale and switch to the unit-norm phase.

    The last encoder layer is divided by the mean activation norm seen in the
    last pretraining epoch. Normalized outputs are unchanged, but gradients
    through the normalization are no longer damped by the grown weights.
    """
    if override > 0:
        scale = float(override)
    else:
        if state.logit_count == 0:
            raise NoPretrainStats("no pretraining logits recorded and no scale override given")
        scale = state.logit_sum / state.logit_count
    if not scale > 0 or not math.isfinite(scale):
        raise InvalidScale(f"pretraining produced an unusable logit scale {scale}")
    encoder = state.encoder.copy()
    if state.logit_count and state.act_norm_sum > 0:
        mean_norm = state.act_norm_sum / state.logit_count
        encoder.W = encoder.W / mean_norm
        encoder.b = encoder.b / mean_norm
    return replace(state, encoder=encoder, scale=scale, phase=CONSTRAINED,
                   agents=renormalize_agents(state.agents))


def mar_objective(encoder, agents, batch, config, scale, sets=None):
    """Total loss and gradients for one constrained batch.

    Returns ``(breakdown, encoder_grads, agent_grads, sets)``. Pass ``sets``
    to reuse a fixed mining result (the selection itself has no gradient).
    Terms with zero weight are skipped and reported as 0.
    """
    A = agents.agents
    E_t, cache_t = enc.forward_batch(encoder, batch.target_x, constrained=True)
    E_a, cache_a = enc.forward_batch(encoder, batch.aux_x, constrained=True)
    G_t = np.zeros_like(E_t)
    G_a = np.zeros_like(E_a)
    G_A = np.zeros_like(A)
    out = LossBreakdown()

    need_labels = config.lambda1 > 0 or (sets is None and config.mining == "soft")
    Y = soft_multilabels(E_t, A, scale) if need_labels else None

    if sets is None:
        sims = pairwise_similarities(E_t)
        if config.mining == "soft":
            sets = mine(sims, agreement_table(Y), config.p)
        else:
            sets = baseline_sets(sims, config.p)
    out.n_pos, out.n_neg = len(sets.positives), len(sets.hard_negatives)
    try:
        out.mdl, G_mdl = mdl_loss(sets, E_t)
        G_t += G_mdl
    except EmptyMiningSet:
        pass

    if config.lambda1 > 0:
        try:
            out.cml, G_Y = cml_loss_from_labels(Y, batch.target_views)
            gF, gA = soft_multilabels_backward(Y, E_t, A, scale, config.lambda1 * G_Y)
            G_t += gF
            G_A += gA
        except NoValidViews:
            pass

    if config.lambda2 > 0:
        out.al, gF_a, gA = al_loss(E_a, batch.aux_labels, A, scale)
        G_a += config.lambda2 * gF_a
        G_A += config.lambda2 * gA
        if config.beta > 0:
            out.rj, gA, gF_t, gF_a = rj_loss(A, E_t, E_a, batch.aux_labels, config.m)
            w = config.lambda2 * config.beta
            G_A += w * gA
            G_t += w * gF_t
            G_a += w * gF_a

    out.total = out.mdl + config.lambda1 * out.cml + config.lambda2 * (out.al + config.beta * out.rj)
    grads = enc.backward_batch(encoder, cache_t, G_t)
    grads_a = enc.backward_batch(encoder, cache_a, G_a)
    for name in grads.names():
        setattr(grads, name, getattr(grads, name) + getattr(grads_a, name))
    return out, grads, G_A, sets


def _norm_error(encoder, agents, batch):
    E = enc.embed(encoder, np.vstack([batch.target_x, batch.aux_x]), constrained=True)
    dev = np.abs(np.linalg.norm(E, axis=1) - 1.0).max()
    return float(max(dev, np.abs(np.linalg.norm(agents.agents, axis=1) - 1.0).max()))


def mar_step(state, batch, config, check_norms=False):
    if state.phase != CONSTRAINED:
        raise ValueError("mar_step requires the constrained phase")
    out, grads, G_A, _ = mar_objective(state.encoder, state.agents, batch, config, state.scale)
    _check_finite(out.total, "training loss")
    grads, G_A = _clip(grads, G_A, config.clip_norm)
    lr = config.learning_rate
    agents = renormalize_agents(AgentBank(state.agents.agents - lr * G_A))
    new = replace(state, encoder=_sgd(state.encoder, grads, lr), agents=agents, step=state.step + 1)
    if check_norms:
        out.norm_error = _norm_error(new.encoder, new.agents, batch)
    return new, out


def evaluate(encoder, dataset, ks=(1, 5, 10)):
    """Cross-view retrieval metrics of the unit-norm embeddings of a labeled set."""
    E = enc.embed(encoder, dataset.features, constrained=True)
    q, g = query_gallery_split(dataset.person_ids, dataset.view_ids)
    full = LabeledEmbeddingSet(E, dataset.person_ids, dataset.view_ids)
    return cmc_map(full.subset(q), full.subset(g), ks)


METRIC_COLUMNS = ("epoch", "L_MDL", "L_CML", "L_AL", "L_RJ", "total", "n_P", "n_N", "scale", "rank1", "mAP")


def _epoch_row(epoch, parts, scale, result):
    mean = lambda attr: float(np.mean([getattr(b, attr) for b in parts]))  # noqa: E731
    return {"epoch": epoch, "L_MDL": mean("mdl"), "L_CML": mean("cml"), "L_AL": mean("al"),
            "L_RJ": mean("rj"), "total": mean("total"), "n_P": mean("n_pos"), "n_N": mean("n_neg"),
            "scale": scale, "rank1": "" if result is None else result.cmc.get(1, ""),
            "mAP": "" if result is None else result.mAP}


@dataclass
class TrainResult:
    state: TrainState
    pretrain_state: TrainState | None
    pretrain_log: list
    log: list
    max_norm_error: float = 0.0


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def run_pretraining(state, config, target, aux, n_epochs=None, evalset=None, on_epoch=None):
    n_epochs = config.pretrain_epochs if n_epochs is None else n_epochs
    rows = []
    steps = steps_per_epoch(config, len(target))
    for epoch in range(1, n_epochs + 1):
        # the logit average covers the most recent epoch only
        state = replace(state, logit_sum=0.0, logit_count=0, act_norm_sum=0.0, epoch=epoch)
        parts = []
        for _ in range(steps):
            batch = compose_batch(config, state.step, target, aux, PRETRAIN)
            state, b = pretrain_step(state, batch, config)
            parts.append(b)
        scale_now = state.logit_sum / state.logit_count
        result = None
        if evalset is not None and config.eval_every and epoch % config.eval_every == 0:
            result = evaluate(state.encoder, evalset)
        rows.append(_epoch_row(epoch, parts, scale_now, result))
        if on_epoch:
            on_epoch(PRETRAIN, rows[-1])
    return state, rows


def run_constrained(state, config, target, aux, evalset=None, on_epoch=None, on_step=None):
    rows = []
    worst = 0.0
    steps = steps_per_epoch(config, len(target))
    for epoch in range(1, config.train_epochs + 1):
        state = replace(state, epoch=epoch)
        parts = []
        for _ in range(steps):
            batch = compose_batch(config, state.step, target, aux, CONSTRAINED)
            state, b = mar_step(state, batch, config, check_norms=on_step is not None)
            worst = max(worst, b.norm_error)
            if on_step:
                on_step(state, b)
            parts.append(b)
        result = None
        if evalset is not None and config.eval_every and epoch % config.eval_every == 0:
            result = evaluate(state.encoder, evalset)
        rows.append(_epoch_row(epoch, parts, state.scale, result))
        if on_epoch:
            on_epoch(CONSTRAINED, rows[-1])
    return state, rows, worst


def train(config, target, aux, evalset=None, out_dir=None, on_epoch=None, on_step=None, init=None):
    """Pretrain, freeze the logit scale, then train the full objective.

    ``init`` resumes from an existing pretraining state instead of running
    phase one. Checkpoints and metrics are written when ``out_dir`` is set.
    """
    config.validate()
    if target.dim != config.d_in or aux.dim != config.d_in:
        from mar.errors import DimensionMismatch
        raise DimensionMismatch(f"config d_in={config.d_in} but data has {target.dim}/{aux.dim}")
    with _limit_threads(config.threads):
        _, ids = aux.label_index()
        pre_rows = []
        if init is None:
            state = init_state(config, len(ids))
            state, pre_rows = run_pretraining(state, config, target, aux, evalset=evalset, on_epoch=on_epoch)
        else:
            state = init.copy()
        pretrain_state = state.copy()
        state = freeze_scale(state, override=config.scale)
        if out_dir is not None:
            save_checkpoint(out_dir, pretrain_state, config, tag="pretrain")
            if pre_rows:
                write_metrics(os.path.join(out_dir, "pretrain_metrics.csv"), pre_rows)
        state, rows, worst = run_constrained(state, config, target, aux, evalset, on_epoch, on_step)
        if out_dir is not None:
            save_checkpoint(out_dir, state, config)
            write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    return TrainResult(state=state, pretrain_state=pretrain_state, pretrain_log=pre_rows, log=rows,
                       max_norm_error=worst)


def pretrain(config, target, aux, evalset=None, out_dir=None, on_epoch=None):
    config.validate()
    with _limit_threads(config.threads):
        _, ids = aux.label_index()
        state = init_state(config, len(ids))
        state, rows = run_pretraining(state, config, target, aux, evalset=evalset, on_epoch=on_epoch)
        if out_dir is not None:
            save_checkpoint(out_dir, state, config, tag="pretrain")
            write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    return state, rows


def write_metrics(path, rows, columns=METRIC_COLUMNS):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    os.replace(tmp, path)


def config_to_text(config, **extra):
    lines = [f"{k} = {v}" for k, v in asdict(config).items()]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


def _paths(out_dir, tag):
    suffix = f"_{tag}" if tag else ""
    return (os.path.join(out_dir, f"encoder{suffix}.bin"), os.path.join(out_dir, f"agents{suffix}.bin"),
            os.path.join(out_dir, f"state{suffix}.txt"))


def save_checkpoint(out_dir, state, config, tag=""):
    from mar.agents import save_agents
    os.makedirs(out_dir, exist_ok=True)
    enc_path, agt_path, side_path = _paths(out_dir, tag)
    enc.save_encoder(enc_path, state.encoder)
    save_agents(agt_path, state.agents)
    count = state.logit_count
    pre_scale = state.logit_sum / count if count else 0.0
    pre_norm = state.act_norm_sum / count if count else 0.0
    text = config_to_text(config, phase=state.phase, frozen_scale=repr(state.scale),
                          pretrain_logit_mean=repr(pre_scale), pretrain_act_norm_mean=repr(pre_norm),
                          step=state.step)
    tmp = f"{side_path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, side_path)


def load_checkpoint(out_dir, tag=""):
    """Return ``(state, sidecar)`` from a checkpoint directory."""
    from mar.agents import load_agents
    from mar.config import parse_kv
    enc_path, agt_path, side_path = _paths(out_dir, tag)
    with open(side_path) as fh:
        side = parse_kv(fh.read())
    phase = side.get("phase", PRETRAIN)
    params = enc.load_encoder(enc_path)
    agents = load_agents(agt_path, constrained=phase == CONSTRAINED)
    pre_mean = float(side.get("pretrain_logit_mean", 0.0))
    pre_norm = float(side.get("pretrain_act_norm_mean", 0.0))
    # the per-epoch sums are stored as means, restored as a single-sample record
    state = TrainState(encoder=params, agents=agents, scale=float(side.get("frozen_scale", 1.0)), phase=phase,
                       step=int(side.get("step", 0)), logit_sum=pre_mean, logit_count=1 if pre_mean else 0,
                       act_norm_sum=pre_norm if pre_mean else 0.0)
    return state, side
