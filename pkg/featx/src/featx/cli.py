"""Command line interface.

    featx make-models      --out DIR [--hidden N --seed N ...]
    featx extract-visual   --manifest M --model DIR --out BANK [--max-tokens N]
    featx extract-textual  --manifest M --model DIR --out BANK [--max-tokens N]

Exit codes follow the engine's convention: 0 success, 2 unusable request,
3 missing or malformed inputs. Heavy imports (torch, transformers) happen
inside the commands so usage errors and manifest problems fail fast.
"""

import argparse
import sys

from .errors import ConfigError, DataError
from .manifest import load_manifest


def _write_report(report, report_path):
    for line in report.lines():
        print(line)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(report.lines()) + "\n")


def _quiet_transformers():
    # shard/weight progress bars would interleave with the report lines
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()


def cmd_make_models(args):
    from . import models

    _quiet_transformers()

    vis_dir = models.make_visual_model(
        f"{args.out}/visual", image_size=args.image_size,
        patch_size=args.patch_size, hidden_size=args.hidden,
        layers=args.layers, heads=args.heads, seed=args.seed)
    txt_dir = models.make_textual_model(
        f"{args.out}/textual", hidden_size=args.hidden, layers=args.layers,
        heads=args.heads, seed=args.seed)
    print(f"visual model written to {vis_dir}")
    print(f"textual model written to {txt_dir}")
    return 0


def _cmd_extract(args, runner_name):
    if args.max_tokens < 1:
        raise ConfigError(f"max_tokens must be positive, got {args.max_tokens}")
    entries = load_manifest(args.manifest)

    from . import extract

    _quiet_transformers()
    runner = getattr(extract, runner_name)
    report = runner(entries, args.model, args.out, max_tokens=args.max_tokens)
    _write_report(report, args.report)
    return 0


def cmd_extract_visual(args):
    return _cmd_extract(args, "extract_visual")


def cmd_extract_textual(args):
    return _cmd_extract(args, "extract_textual")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="featx",
        description="Extract pre-trained visual and textual token banks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-models",
                       help="write small randomly initialized encoder checkpoints")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_models)

    for name, func, payload in (
            ("extract-visual", cmd_extract_visual, "image path"),
            ("extract-textual", cmd_extract_textual, "description text")):
        p = sub.add_parser(name, help=f"run the {name.split('-')[1]} encoder")
        p.add_argument("--manifest", required=True, metavar="PATH",
                       help=f"entity_id<TAB>{payload.replace(' ', '_')} lines")
        p.add_argument("--model", required=True, metavar="DIR")
        p.add_argument("--out", required=True, metavar="PATH")
        p.add_argument("--max-tokens", type=int, default=16)
        p.add_argument("--report", default="", metavar="PATH",
                       help="also write the skip report to a file")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
