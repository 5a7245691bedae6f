"""``tiny-distill`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import contextlib
import os
import sys

from ..errors import ConfigError, TinyDistillError
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .commands import COMMANDS
from .config import RunConfig, load_config, parse_config, with_train

THREADS_ENV = "TINY_DISTILL_THREADS"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiny-distill", description="Desk-scale layer-aligned distillation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH", help="run configuration (YAML)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, metavar="N", help="override the run seed")
        p.add_argument("--resume", action="store_true", help="skip finished stages and continue from last.twck")
        if name == "eval":
            p.add_argument("checkpoints", nargs="*", metavar="NAME=PATH",
                           help="checkpoints to compare (default: every finished stage)")
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _parse_checkpoints(items):
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"checkpoint argument must look like NAME=PATH, got {item!r}")
        out[name] = path
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        with _thread_limit():
            if args.command == "eval":
                COMMANDS["eval"](cfg, _parse_checkpoints(args.checkpoints), resume=args.resume)
            else:
                COMMANDS[args.command](cfg, resume=args.resume)
    except ConfigError as exc:
        print(f"tiny-distill {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except TinyDistillError as exc:
        print(f"tiny-distill {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


__all__ = [
    "Checkpoint",
    "CheckpointError",
    "RunConfig",
    "build_parser",
    "load_checkpoint",
    "load_config",
    "main",
    "parse_config",
    "save_checkpoint",
    "with_train",
]
