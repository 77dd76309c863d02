"""Command-line entry point: train, eval, ablate, synth, inspect.

Exit codes: 0 success, 2 configuration or usage problem, 3 data or file
format problem, 4 numeric failure during training or evaluation.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import os
import sys

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import diffcore as dc
from .data import (SynthConfig, load_token_bank, load_triples, synth_generate,
                   write_token_bank, write_triples)
from .errors import ConfigError, DataError, NumericFailure
from .evaluator import evaluate, report_lines, write_metrics
from .trainer import Model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_VARIANTS = [
    ("full", {}),
    ("no_fgmaf", {"model.enable_fgmaf": False}),
    ("no_sacl", {"sacl.enable_sv": False, "sacl.enable_st": False}),
    ("no_st", {"sacl.enable_st": False}),
    ("no_sv", {"sacl.enable_sv": False}),
]
TAU_SWEEP = (0.02, 0.1, 0.5)
K_SWEEP = (8, 16)


# ---------------------------------------------------------------------------
# config and data plumbing


def _add_config_flags(p):
    p.add_argument("--config", default=None, metavar="PATH",
                   help="key = value configuration file")
    for key, (kind, default) in cf.SCHEMA.items():
        p.add_argument(f"--{key}", dest=key, default=None, metavar=kind.upper(),
                       help=f"override {key} (default {default!r})")


def _resolve_config(args):
    text, source = None, "<defaults>"
    if args.config:
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
        source = args.config
    overrides = {k: getattr(args, k) for k in cf.SCHEMA
                 if getattr(args, k) is not None}
    return cf.resolve(text, source=source, env=os.environ, overrides=overrides)


def _load_dataset(cfg):
    data_dir = cfg["data.dir"]
    if not data_dir:
        raise ConfigError("data.dir must point at a dataset directory")
    store = load_triples(data_dir)
    vis_path = cfg["data.visual_bank"] or os.path.join(data_dir, "visual.mmtk")
    txt_path = cfg["data.textual_bank"] or os.path.join(data_dir, "textual.mmtk")
    for path, modality in ((vis_path, "visual"), (txt_path, "textual")):
        if not os.path.isfile(path):
            raise DataError(f"{modality} token bank not found: {path}")
    return (store, load_token_bank(vis_path, "visual"),
            load_token_bank(txt_path, "textual"))


def _save_checkpoint(path, result, config_text):
    opt = result.model.optimizer
    params = {n: result.model.params[n] for n in sorted(result.model.params)}
    ck.save(path, params, epoch=result.best_epoch, config_text=config_text,
            adam_state=(opt.state.step, opt.state.m, opt.state.v))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = _resolve_config(args)
    if not cfg["train.checkpoint"]:
        cfg.values["train.checkpoint"] = "model.tsck"
    if not cfg["train.log"]:
        cfg.values["train.log"] = "train.log"
    tc = cfg.train_config()
    tc.validate()
    store, vis, txt = _load_dataset(cfg)

    text = cfg.render()
    with open(cfg["train.log"], "w", encoding="utf-8") as log:
        result = train(store, vis, txt, tc, log_stream=log, config_text=text)
    _save_checkpoint(cfg["train.checkpoint"], result, text)
    print(f"best epoch {result.best_epoch}, valid mrr {result.best_valid_mrr:.6f}")
    print(f"checkpoint written to {cfg['train.checkpoint']}")
    print(f"training log written to {cfg['train.log']}")
    return EXIT_OK


def _model_from_checkpoint(path, data_dir=None):
    loaded = ck.load(path)
    cfg = cf.RunConfig(cf.parse_text(loaded["config_text"], source=path))
    if data_dir:
        cfg.values["data.dir"] = data_dir
        cfg.values["data.visual_bank"] = ""
        cfg.values["data.textual_bank"] = ""
    tc = cfg.train_config()
    tc.validate()
    store, vis, txt = _load_dataset(cfg)
    model = Model(store, vis, txt, tc)
    ck.restore_model(model, loaded)
    return model, store, loaded


def cmd_eval(args):
    model, store, _ = _model_from_checkpoint(args.checkpoint, args.data)
    filtered = not args.raw
    metrics, results = evaluate(model, store, args.split, filtered=filtered,
                                collect_ranks=True)
    mode = "filtered" if filtered else "raw"
    for line in report_lines(metrics, label=f"{args.split} {mode}"):
        print(line)
    if args.out:
        write_metrics(metrics, args.out)
        print(f"metrics written to {args.out}")
    if args.dump_ranks:
        with open(args.dump_ranks, "w", encoding="utf-8") as fh:
            fh.write("head\trelation\tgold\trank\n")
            for r in results:
                fh.write(f"{r.query[0]}\t{r.query[1]}\t{r.gold}\t{r.rank}\n")
        print(f"per-query ranks written to {args.dump_ranks}")
    return EXIT_OK


def _sweep_variants(sweep):
    if sweep == "components":
        return ABLATION_VARIANTS
    if sweep == "tau":
        return [(f"tau_{v}", {"sacl.tau": v}) for v in TAU_SWEEP]
    if sweep == "k":
        return [(f"k_{v}", {"sacl.k": v}) for v in K_SWEEP]
    raise ConfigError(f"unknown sweep {sweep!r}")


def cmd_ablate(args):
    cfg = _resolve_config(args)
    store, vis, txt = _load_dataset(cfg)
    base_text = cfg.render()
    sha = hashlib.sha256(base_text.encode("utf-8")).hexdigest()

    lines = [f"# config sha256 {sha}", "variant\tmrr\thits1\thits3\thits10"]
    for name, tweaks in _sweep_variants(args.sweep):
        vcfg = cf.RunConfig(dict(cfg.values))
        vcfg.values.update(tweaks)
        vcfg.values["train.checkpoint"] = ""
        vcfg.values["train.log"] = ""
        tc = vcfg.train_config()
        tc.validate()
        log = io.StringIO()
        result = train(store, vis, txt, tc, log_stream=log,
                       config_text=vcfg.render())
        if args.log_dir:
            os.makedirs(args.log_dir, exist_ok=True)
            log_path = os.path.join(args.log_dir, f"{name}.log")
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write(log.getvalue())
        m = evaluate(result.model, store, "valid", filtered=True).overall
        lines.append(f"{name}\t{m.mrr:.6f}\t{m.hits[1]:.6f}"
                     f"\t{m.hits[3]:.6f}\t{m.hits[10]:.6f}")

    report = "\n".join(lines)
    print(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report + "\n")
    return EXIT_OK


def cmd_synth(args):
    scfg = SynthConfig(entity_count=args.entities, relation_count=args.relations,
                       triple_count=args.triples, tokens_per_modality=args.tokens,
                       token_dim=args.token_dim, seed=args.seed)
    store, vis, txt = synth_generate(scfg)
    os.makedirs(args.out, exist_ok=True)
    write_triples(store, args.out)
    write_token_bank(vis, os.path.join(args.out, "visual.mmtk"))
    write_token_bank(txt, os.path.join(args.out, "textual.mmtk"))
    print(f"wrote dataset to {args.out}: {store.entity_count} entities, "
          f"{store.relation_count} relations, "
          f"{len(store.train)}/{len(store.valid)}/{len(store.test)} triples")
    return EXIT_OK


def _inspect_bank(path):
    bank = load_token_bank(path)
    counts = [seq.shape[0] for seq in bank.sequences.values()]
    print(f"MMTK token bank {path}")
    print(f"modality = {bank.modality}")
    print(f"dim = {bank.dim}")
    print(f"entity_count = {len(bank.sequences)}")
    if counts:
        values = np.concatenate([s.ravel() for s in bank.sequences.values()])
        print(f"tokens = {sum(counts)} (per entity min {min(counts)}, "
              f"max {max(counts)})")
        print(f"values: min {values.min():.6f} max {values.max():.6f} "
              f"mean {values.mean():.6f}")


def _inspect_checkpoint(path, args):
    loaded = ck.load(path)
    print(f"checkpoint {path}")
    print(f"epoch = {loaded['epoch']}")
    print(f"config sha256 = {loaded['config_sha']}")
    print(f"tensors = {len(loaded['order'])}")
    for name in loaded["order"]:
        arr = loaded["tensors"][name]
        print(f"  {name}  {arr.shape}  min {arr.min():.6f} "
              f"max {arr.max():.6f} mean {arr.mean():.6f}")
    if args.dump_embeddings:
        model, _, _ = _model_from_checkpoint(path, args.data)
        fused = model.fused_entity_matrix()
        with open(args.dump_embeddings, "w", encoding="utf-8") as fh:
            for eid, row in enumerate(fused):
                fh.write(f"{eid} " + " ".join(f"{v:.8g}" for v in row) + "\n")
        print(f"fused embeddings written to {args.dump_embeddings}")


def cmd_inspect(args):
    if not os.path.isfile(args.path):
        raise DataError(f"no such file: {args.path}")
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"MMTK":
        if args.dump_embeddings:
            raise ConfigError("--dump-embeddings only applies to checkpoints")
        _inspect_bank(args.path)
    elif magic == b"TSCK":
        _inspect_checkpoint(args.path, args)
    else:
        raise DataError(f"{args.path}: unknown magic {magic!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="tsam",
        description="Multi-modal knowledge graph completion at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", default=None, metavar="DIR",
                   help="dataset directory (default: the one in the checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--raw", action="store_true",
                      help="rank against all candidates, no filtering")
    mode.add_argument("--filtered", action="store_true",
                      help="filter known-true answers (default)")
    p.add_argument("--out", default="", metavar="PATH",
                   help="also write metrics as key = value lines")
    p.add_argument("--dump-ranks", default="", metavar="PATH",
                   help="write per-query ranks for case inspection")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train component-ablation or sweep variants")
    _add_config_flags(p)
    p.add_argument("--sweep", default="components",
                   choices=("components", "tau", "k"))
    p.add_argument("--out", default="", metavar="PATH")
    p.add_argument("--log-dir", default="", metavar="DIR",
                   help="keep each variant's training log")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic dataset with token banks")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--relations", type=int, default=5)
    p.add_argument("--triples", type=int, default=200)
    p.add_argument("--tokens", type=int, default=4)
    p.add_argument("--token-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="describe a token bank or checkpoint")
    p.add_argument("path")
    p.add_argument("--dump-embeddings", default="", metavar="PATH",
                   help="write fused entity vectors as text (checkpoints only)")
    p.add_argument("--data", default=None, metavar="DIR",
                   help="dataset directory for --dump-embeddings")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, dc.NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
