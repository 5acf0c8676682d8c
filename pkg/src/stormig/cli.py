"""Command line entry point: one subcommand per pipeline stage plus ``pipeline``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, Pipeline, PipelineError

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file layered over the packaged defaults, or a packaged name such as smoke.ini")
    common.add_argument("--run-dir", default="run", help="directory holding artifacts and manifest.json (default: run)")
    common.add_argument("--seed", type=int, help="override every component seed")
    common.add_argument("--force", action="store_true", help="rerun stages even when their checksums match")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="stormig", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    pipe = sub.add_parser("pipeline", parents=[common], help="run several stages in order")
    pipe.add_argument(
        "--stage",
        action="append",
        help="stage to run (repeatable or comma separated); default: all stages",
    )
    return ap


def _error(kind: str, message: str, stage: str | None = None) -> None:
    # one machine-readable line on stderr
    print("error: " + json.dumps({"stage": stage, "kind": kind, "message": message}, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG
    if args.command == "pipeline":
        stages = None
        if args.stage:
            stages = [s.strip() for item in args.stage for s in item.split(",") if s.strip()]
    else:
        stages = [args.command]
    try:
        pipe = Pipeline(cfg, args.run_dir, force=args.force)
        pipe.run(stages)
    except PipelineError as exc:
        _error(exc.kind, str(exc), exc.stage)
        return EXIT_STAGE
    for s in pipe.ran:
        print(f"{s}: done")
    for s in pipe.skipped:
        print(f"{s}: up to date")
    return 0


if __name__ == "__main__":
    sys.exit(main())
