"""Command-line entry point: ``mar <command> [options]``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import csv
import dataclasses
import logging
import os
import sys

import numpy as np

from mar import data as data_mod
from mar import encoder as enc
from mar.config import ConfigError, load_config, parse_kv, resolve, to_text
from mar.errors import DataError, EmptyDataset, InvalidSpec, MarError, NumericalError
from mar.evalset import LabeledEmbeddingSet, cmc_map, query_gallery_split
from mar.geometry import pairwise_similarities
from mar.mining import baseline_sets, mine
from mar.softlabel import agreement_table, soft_multilabels
from mar.trainer import (CONSTRAINED, compose_batch, freeze_scale, load_checkpoint, pretrain, train,
                         write_metrics, _limit_threads)

log = logging.getLogger("mar")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
SWEEP_KEYS = ("lambda1", "lambda2", "n_persons_aux")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable, wins over --config)")


def _data_flag(p):
    p.add_argument("--data", help="directory with target.txt, aux.txt and optionally test.txt; "
                                  "synthetic data is generated from the config when omitted")


def build_parser():
    parser = _Parser(prog="mar", description="Soft-multilabel guided cross-view embedding learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic two-domain dataset")
    _config_flags(p)
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", required=True)

    for name, text in (("pretrain", "run the auxiliary pretraining phase only"),
                       ("train", "pretrain, then train the full objective")):
        p = sub.add_parser(name, help=text)
        _config_flags(p)
        _data_flag(p)
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--init", help="checkpoint directory holding a pretraining checkpoint to start from")

    p = sub.add_parser("eval", help="cross-view retrieval metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--tag", default="", help="checkpoint tag, e.g. 'pretrain'")
    p.add_argument("--data", help="labeled dataset file or directory with test.txt; "
                                  "defaults to the held-out synthetic set of the checkpoint's config")
    p.add_argument("--per-probe", help="write per-probe AP to this CSV file")

    p = sub.add_parser("mine-report", help="dump the mining decision for every pair of one batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tag", default="")
    _data_flag(p)
    p.add_argument("--step", type=int, default=0, help="batch index")
    p.add_argument("--mining", choices=("soft", "feature"), help="override the checkpoint's mining mode")
    p.add_argument("--out", required=True, help="CSV output path")

    p = sub.add_parser("sweep", help="rerun training over a grid of one key")
    _config_flags(p)
    _data_flag(p)
    p.add_argument("--param", required=True, choices=SWEEP_KEYS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    return parser


# --- helpers ---------------------------------------------------------------

def _resolve(args):
    overrides = list(args.set)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    cfg, spec = load_config(args.config, overrides)
    cfg.validate()
    spec.validate()
    return cfg, spec


def _write_config(out_dir, cfg, spec):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.txt")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(to_text(cfg, spec))
    os.replace(tmp, path)


def _load_data(data_dir, spec):
    """Return ``(target, aux, heldout)``; heldout may be None for file input."""
    if data_dir is None:
        target, aux = data_mod.generate(spec)
        return target, aux, data_mod.generate_heldout(spec)
    target = data_mod.load(os.path.join(data_dir, "target.txt"))
    aux = data_mod.load(os.path.join(data_dir, "aux.txt"))
    test_path = os.path.join(data_dir, "test.txt")
    heldout = data_mod.load(test_path) if os.path.exists(test_path) else None
    return target, aux, heldout


def _labeled(ds):
    return ds is not None and len(ds) and np.all(ds.person_ids >= 0)


def _progress(phase, row):
    rank1 = row.get("rank1", "")
    extra = f" rank1={rank1:.4f}" if rank1 != "" else ""
    log.info("%s epoch %d total=%.5f%s", phase, row["epoch"], row["total"], extra)


def _checkpoint_config(ckpt_dir):
    path = os.path.join(ckpt_dir, "config.txt")
    if not os.path.exists(path):
        raise UsageError(f"{ckpt_dir} has no config.txt")
    with open(path) as fh:
        return resolve(parse_kv(fh.read()))


# --- commands --------------------------------------------------------------

def cmd_synth(args):
    cfg, spec = _resolve(args)
    target, aux = data_mod.generate(spec)
    test = data_mod.generate_heldout(spec)
    os.makedirs(args.out, exist_ok=True)
    for name, ds in (("target", target), ("aux", aux), ("test", test)):
        data_mod.save(os.path.join(args.out, f"{name}.txt"), ds)
    _write_config(args.out, cfg, spec)
    print(f"wrote {len(target)} target, {len(aux)} auxiliary, {len(test)} held-out records to {args.out}")


def cmd_pretrain(args):
    cfg, spec = _resolve(args)
    target, aux, heldout = _load_data(args.data, spec)
    _write_config(args.out, cfg, spec)
    evalset = heldout if _labeled(heldout) else None
    with _limit_threads(cfg.threads):
        state, rows = pretrain(cfg, target, aux, evalset=evalset, out_dir=args.out, on_epoch=_progress)
    print(f"pretraining done: {len(rows)} epochs, mean true-class logit "
          f"{state.logit_sum / max(state.logit_count, 1):.6g}")


def cmd_train(args):
    cfg, spec = _resolve(args)
    target, aux, heldout = _load_data(args.data, spec)
    _write_config(args.out, cfg, spec)
    init = None
    if args.init:
        init, _ = load_checkpoint(args.init, tag="pretrain")
    evalset = heldout if _labeled(heldout) else None
    with _limit_threads(cfg.threads):
        res = train(cfg, target, aux, evalset=evalset, out_dir=args.out, on_epoch=_progress, init=init)
    last = res.log[-1] if res.log else {}
    summary = f"training done: {len(res.log)} epochs, scale {res.state.scale:.6g}"
    if last.get("rank1", "") != "":
        summary += f", rank1 {last['rank1']:.4f}, mAP {last['mAP']:.4f}"
    print(summary)


def cmd_eval(args):
    cfg, spec = _checkpoint_config(args.checkpoint)
    state, _ = load_checkpoint(args.checkpoint, tag=args.tag)
    if args.data is None:
        ds = data_mod.generate_heldout(spec)
    elif os.path.isdir(args.data):
        ds = data_mod.load(os.path.join(args.data, "test.txt"))
    else:
        ds = data_mod.load(args.data)
    if not _labeled(ds):
        raise EmptyDataset("evaluation needs a non-empty dataset with known person ids")
    with _limit_threads(cfg.threads):
        E = enc.embed(state.encoder, ds.features, constrained=True)
    full = LabeledEmbeddingSet(E, ds.person_ids, ds.view_ids)
    q, g = query_gallery_split(ds.person_ids, ds.view_ids)
    res = cmc_map(full.subset(q), full.subset(g), ks=(1, 5, 10))
    for line in res.as_lines():
        print(line)
    if args.per_probe:
        with open(args.per_probe, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "ap"])
            for k, ap in enumerate(res.ap):
                w.writerow([k, repr(float(ap))])


def cmd_mine_report(args):
    cfg, spec = _checkpoint_config(args.checkpoint)
    if args.mining:
        cfg = dataclasses.replace(cfg, mining=args.mining)
    state, _ = load_checkpoint(args.checkpoint, tag=args.tag)
    if state.phase != CONSTRAINED:
        state = freeze_scale(state, override=cfg.scale)
    target, aux, _ = _load_data(args.data, spec)
    batch = compose_batch(cfg, args.step, target, aux)
    E = enc.embed(state.encoder, batch.target_x)
    sims = pairwise_similarities(E)
    agr = agreement_table(soft_multilabels(E, state.agents, state.scale))
    sets = mine(sims, agr, cfg.p) if cfg.mining == "soft" else baseline_sets(sims, cfg.p)
    label = np.full(len(sims), "none", dtype=object)
    label[sets.positive_slots] = "P"
    label[sets.negative_slots] = "N"
    I, J = sims.pairs
    # report indices into the target dataset
    I, J = batch.target_idx[I], batch.target_idx[J]
    tmp = f"{args.out}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_i", "pair_j", "similarity", "agreement", "set"])
        for k in range(len(sims)):
            w.writerow([int(I[k]), int(J[k]), repr(float(sims.values[k])), repr(float(agr.values[k])), label[k]])
    os.replace(tmp, args.out)
    print(f"{len(sets.positives)} positives, {len(sets.hard_negatives)} hard negatives "
          f"out of {len(sims)} pairs -> {args.out}")


def cmd_sweep(args):
    cfg, spec = _resolve(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")
    os.makedirs(args.out, exist_ok=True)
    _write_config(args.out, cfg, spec)
    base = dict(parse_kv(to_text(cfg, spec)))
    rows = []
    for value in values:
        point_cfg, point_spec = resolve({**base, args.param: value})
        point_cfg.validate()
        point_spec.validate()
        run_dir = os.path.join(args.out, f"{args.param}={value}")
        target, aux, heldout = _load_data(args.data, point_spec)
        _write_config(run_dir, point_cfg, point_spec)
        evalset = heldout if _labeled(heldout) else None
        with _limit_threads(point_cfg.threads):
            res = train(point_cfg, target, aux, evalset=evalset, out_dir=run_dir, on_epoch=_progress)
        last = res.log[-1] if res.log else {}
        rows.append({"param": args.param, "value": value, "rank1": last.get("rank1", ""),
                     "mAP": last.get("mAP", ""), "total": last.get("total", "")})
        print(f"{args.param}={value}: rank1={last.get('rank1', '')} mAP={last.get('mAP', '')}")
    write_metrics(os.path.join(args.out, "sweep.csv"), rows, columns=("param", "value", "rank1", "mAP", "total"))


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "mine-report": cmd_mine_report, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"mar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"mar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, InvalidSpec, MarError, ValueError) as exc:
        print(f"mar: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
