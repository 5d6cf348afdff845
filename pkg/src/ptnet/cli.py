"""Command line: generate | init-prototypes | train | eval.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import config as C
from . import synthscene as S
from . import trainer as TR
from .container import ContainerFormatError, read_pgm
from .metrics import tokenize
from .report import write_eval_report, write_training_report

log = logging.getLogger("ptnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inconsistent inputs (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers --------------------------------------------------------------------------

def _load_config(path) -> C.RunConfig:
    if path is None:
        return C.RunConfig()
    try:
        return C.load(path)
    except C.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _load_dataset(path) -> S.Dataset:
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise FileNotFoundError(f"no dataset manifest in {path}")
    return S.load_dataset(path)


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- commands ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = _load_config(args.config)
    n = args.n if args.n is not None else cfg.data.n_pairs
    seed = args.seed if args.seed is not None else cfg.data.seed
    mix_text = args.mix if args.mix is not None else cfg.data.mix
    try:
        mix = C.parse_mix(mix_text) if mix_text else None
    except (C.ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if n < 10:
        raise UsageError("--n must be at least 10")
    if os.path.exists(os.path.join(args.out, "manifest.json")) and not args.force:
        raise UsageError(f"{args.out} already holds a dataset; pass --force to overwrite")
    manifest = S.build_dataset(args.out, n, seed=seed, mix=mix, config=cfg.data.scene())
    print(json.dumps({"out": args.out, "split_sizes": manifest["split_sizes"],
                      "type_counts": manifest["type_counts"],
                      "manifest_sha256": S.manifest_hash(args.out)}))
    return EXIT_OK


def cmd_init_prototypes(args):
    cfg = _load_config(args.config)
    if args.k is not None:
        cfg.model.k = args.k
    if args.seed is not None:
        cfg.train.seed = args.seed
    if cfg.model.k < 1:
        raise UsageError("--k must be positive")
    if os.path.exists(args.out) and not args.force:
        raise UsageError(f"{args.out} exists; pass --force to overwrite")
    data = _load_dataset(args.data)
    train = data.split("train")
    if cfg.model.k > len(train):
        raise UsageError(f"k={cfg.model.k} exceeds the {len(train)} training pairs")
    cfg.ablation.proto = True
    model = TR.build_model(cfg)
    from .prototypes import build_bank
    bank = build_bank(model.backbone, train.images1, train.images2, train.masks, cfg.model.k,
                      tau=cfg.train.tau_proto, sigma=cfg.train.sigma, seed=cfg.train.seed,
                      dataset_hash=S.manifest_hash(args.data))
    bank.provenance.update(model_seed=cfg.model.seed, config=cfg.to_dict())
    TR.save_bank(bank, args.out, force=args.force)
    print(json.dumps({"out": args.out, "shape": list(bank.prototypes.shape),
                      "dataset_hash": bank.provenance["dataset_hash"]}))
    return EXIT_OK


def _apply_ablation_flags(cfg, args):
    for flag, field in (("no_proto", "proto"), ("no_tamg", "tamg"),
                        ("no_detguided", "det_guided"), ("no_align", "align")):
        if getattr(args, flag):
            setattr(cfg.ablation, field, False)


def cmd_train(args):
    data = _load_dataset(args.data)
    train = data.split("train")
    dhash = S.manifest_hash(args.data)
    if args.resume:
        state = TR.load_checkpoint(args.resume)
        if args.config:
            log.warning("--config is ignored when resuming; the checkpoint config is used")
        if args.epochs is not None:
            state.config.train.epochs = args.epochs
    else:
        cfg = _load_config(args.config)
        _apply_ablation_flags(cfg, args)
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        bank = None
        if args.bank:
            if not cfg.ablation.proto:
                log.warning("--no-proto given: ignoring prototype bank %s", args.bank)
            else:
                bank = TR.load_bank(args.bank)
                bank_hash = bank.provenance.get("dataset_hash")
                if bank_hash and bank_hash != dhash:
                    log.warning("bank %s was built from a different dataset (%s...)",
                                args.bank, bank_hash[:12])
                if bank.prototypes.shape[0] != cfg.model.k:
                    raise UsageError(f"bank has {bank.prototypes.shape[0]} prototypes, "
                                     f"config k={cfg.model.k}")
        try:
            state = TR.new_state(cfg, train, bank=bank, dataset_hash=dhash)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    cfg = state.config
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.ini"), cfg.dumps())
    log_path = os.path.join(args.out, "log.jsonl")
    mode = "a" if args.resume and os.path.exists(log_path) else "w"
    if mode == "w" and state.log:
        # resumed into a fresh directory: carry the earlier epochs over
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in state.log:
                fh.write(json.dumps(rec) + "\n")
        mode = "a"
    val = data.split("val")
    with open(log_path, mode, encoding="utf-8") as fh:
        while state.epoch < cfg.train.epochs:
            rec = TR.train_epoch(state, train)
            if cfg.train.eval_every and rec["epoch"] % cfg.train.eval_every == 0 and len(val):
                rec["val"] = TR.evaluate(state.model, val).summary()
                state.log[-1] = rec
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            log.info("epoch %d  L_c %.4f  L_d %.4f", rec["epoch"], rec["L_c"], rec["L_d"])
    TR.save_checkpoint(state, os.path.join(args.out, "checkpoint"))
    if not args.no_plots:
        write_training_report(state.log, args.out)
    print(json.dumps({"out": args.out, "epochs": state.epoch,
                      "final": {k: state.log[-1][k] for k in ("L_c", "L_d", "L_a")}}))
    return EXIT_OK


def _read_predictions(path, split: S.Dataset):
    base = os.path.dirname(os.path.abspath(path))
    by_id = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pid, caption, mask = rec["id"], rec["caption"], rec["mask"]
            except (ValueError, KeyError) as exc:
                raise UsageError(f"{path}:{n}: bad prediction record ({exc})") from None
            by_id[str(pid)] = (caption, mask)
    missing = [i for i in split.ids if i not in by_id]
    if missing:
        raise UsageError(f"predictions missing {len(missing)} ids of the split, e.g. {missing[0]}")
    caps, masks = [], []
    for i in split.ids:
        caption, mask = by_id[i]
        caps.append(tokenize(caption))
        masks.append(read_pgm(os.path.join(base, mask)))
    return TR.Predictions(list(split.ids), caps, np.stack(masks), None)


def cmd_eval(args):
    if bool(args.ckpt) == bool(args.predictions):
        raise UsageError("give exactly one of --ckpt or --predictions")
    try:
        data = _load_dataset(args.data)
        split = data.split(args.split)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(split) == 0:
        raise UsageError(f"split {args.split!r} is empty")
    meta = {"split": args.split, "n": len(split), "dataset_hash": S.manifest_hash(args.data),
            "version": __version__}
    if args.ckpt:
        state = TR.load_checkpoint(args.ckpt)
        preds = TR.predict(state.model, split)
        meta.update(source={"checkpoint": os.path.abspath(args.ckpt), "epoch": state.epoch},
                    config=state.config.to_dict())
    else:
        preds = _read_predictions(args.predictions, split)
        meta.update(source={"predictions": os.path.abspath(args.predictions)}, config=None)
    for m, g in zip(preds.masks, split.masks):
        if m.shape != g.shape:
            raise UsageError(f"predicted mask shape {m.shape} != ground truth {g.shape}")
    report = TR.score(preds, split)
    os.makedirs(args.out, exist_ok=True)
    write_eval_report(report, args.out, meta, plots=args.plots)
    if args.ckpt:
        TR.write_predictions(preds, os.path.join(args.out, "predictions"))
        if args.plots and state.log:
            write_training_report(state.log, args.out)
    print(json.dumps(report.summary()))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ptnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, help="number of pairs (default from config: 512)")
    g.add_argument("--seed", type=int)
    g.add_argument("--mix", help="type weights, e.g. none=0.26,add_block=0.25,...")
    g.add_argument("--config", help="run config; its [data] section supplies defaults")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("init-prototypes", help="cluster a prototype bank from the train split")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True, help="bank directory to create")
    b.add_argument("--k", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--config")
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_init_prototypes)

    t = sub.add_parser("train", help="train jointly on the train split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--bank", help="bank directory from init-prototypes")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--no-proto", action="store_true", help="disable prototype modulation")
    t.add_argument("--no-tamg", action="store_true", help="replace gating with a uniform mean")
    t.add_argument("--no-detguided", action="store_true", help="drop detection tokens")
    t.add_argument("--no-align", action="store_true", help="drop the alignment loss")
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--ckpt")
    e.add_argument("--predictions", help="JSON-lines file of {id, caption, mask}")
    e.add_argument("--plots", action="store_true", help="also write SVG/PNG figures")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ptnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TR.TrainingAborted as exc:
        print(f"ptnet: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ContainerFormatError, json.JSONDecodeError, KeyError) as exc:
        print(f"ptnet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
