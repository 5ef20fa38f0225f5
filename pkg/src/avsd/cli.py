"""Command line entry point.

Exit status: 0 on success, 1 when a stage fails at run time, 2 for usage
or configuration errors. ``AVSD_LOG`` sets the log level (default INFO).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from avsd import pipeline
from avsd.checkpoint import CheckpointError
from avsd.config import ConfigError, RunConfig, apply_override, dump_config, load_config

log = logging.getLogger("avsd")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")

    p = _Parser(prog="avsd", description="Audio-visual self-distillation pretraining and lipreading toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")

    pt = sub.add_parser("pretrain", parents=[common], help="self-distillation pretraining")
    pt.add_argument("--corpus", required=True)
    pt.add_argument("--out", required=True, help="checkpoint path")

    ft = sub.add_parser("finetune", parents=[common], help="CTC/attention fine-tuning")
    ft.add_argument("--corpus", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--init", help="pretrained checkpoint; omit to train from scratch")
    ft.add_argument("--transfer", action="store_true", help="cross-lingual transfer: never freeze the encoder")
    ft.add_argument("--view", choices=["lip", "face"])

    ad = sub.add_parser("adapt", parents=[common], help="speaker adaptation of an si checkpoint")
    ad.add_argument("--corpus", required=True)
    ad.add_argument("--si", required=True, help="speaker-independent checkpoint")
    ad.add_argument("--speaker", required=True)
    ad.add_argument("--out-dir", required=True)

    de = sub.add_parser("decode", parents=[common], help="(ensemble) beam search decoding")
    de.add_argument("--corpus", required=True)
    de.add_argument("--models", required=True, help="comma-separated checkpoints")
    de.add_argument("--views", default="lip", help="comma-separated views, one per model (or one for all)")
    de.add_argument("--out", required=True, help="JSON Lines output")

    sc = sub.add_parser("score", parents=[common], help="CER report with bootstrap intervals")
    sc.add_argument("--corpus", required=True)
    sc.add_argument("--hyps", required=True)
    sc.add_argument("--out", required=True, help="CSV report")

    dc = sub.add_parser("dump-config", help="print the default configuration")
    dc.add_argument("--set", action="append", default=[])
    return p


def _setup_logging() -> None:
    level = os.environ.get("AVSD_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _split(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def dispatch(args, run: RunConfig) -> None:
    cmd = args.command
    if cmd == "gen-corpus":
        pipeline.gen_corpus_stage(run, args.out)
    elif cmd == "pretrain":
        pipeline.pretrain_stage(run, args.corpus, args.out)
    elif cmd == "finetune":
        if args.transfer:
            if args.init is None:
                raise UsageError("--transfer needs --init")
            run.finetune.transfer = True
        if args.view:
            run.finetune.view = args.view
        pipeline.finetune_stage(run, args.corpus, args.out, init=args.init)
    elif cmd == "adapt":
        pipeline.adapt_stage(run, args.corpus, args.si, args.speaker, args.out_dir)
    elif cmd == "decode":
        pipeline.decode_stage(run, args.corpus, _split(args.models), _split(args.views), args.out)
    elif cmd == "score":
        pipeline.score_stage(run, args.corpus, args.hyps, args.out)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "dump-config":
            run = RunConfig()
            for item in args.set:
                apply_override(run, item)
            sys.stdout.write(dump_config(run))
            return EXIT_OK
        run = load_config(args.config, args.set)
    except UsageError as exc:
        print(f"avsd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"avsd: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        dispatch(args, run)
    except UsageError as exc:
        print(f"avsd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ValueError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
