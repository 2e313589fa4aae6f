"""Command-line entry point: one subcommand per pipeline stage plus run-all."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from ..errors import StageError, TCoreError
from .config import PipelineConfig
from .pipeline import STAGES, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcore", description="Backdoor defense pipeline for transfer learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        p = sub.add_parser(name, help=f"run the pipeline through {'eval' if name == 'run-all' else name}")
        p.add_argument("--config", help="JSON config; defaults when omitted")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--resume", action="store_true", help="skip stages that already completed")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--deterministic", action="store_true", help="deterministic kernels")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.deterministic:
            cfg.deterministic = True
    except TCoreError as exc:
        print(f"tcore: config error: {exc}", file=sys.stderr)
        return 2
    until = "eval" if args.command == "run-all" else args.command
    try:
        report = run_pipeline(cfg, args.out, until=until, resume=args.resume,
                              on_stage=lambda s, t: print(f"[{s}] done in {t:.1f}s", file=sys.stderr))
    except StageError as exc:
        print(f"tcore: {exc}", file=sys.stderr)
        return 1
    except TCoreError as exc:
        print(f"tcore: {exc}", file=sys.stderr)
        return 2
    if report is not None and until == "eval":
        print(report.table(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
