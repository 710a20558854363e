"""Command-line entry point.

Each pipeline stage is its own subcommand operating on the persisted
artifacts of the previous one; run-all executes the full pipeline.
Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .errors import ConfigError, StageError
from .pipeline import STAGES, Runner

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

_STAGE_HELP = {
    "partition": "ingest or synthesize data and split it across clients",
    "train-pool": "train the candidate model pool over the re-training grid",
    "build-sets": "evaluate candidates and construct Rashomon selections",
    "metrics": "compute multiplicity metrics per selection cell",
    "fairness": "demographic-parity sweep over the smallest viable global set",
    "report": "render SVG charts plus sibling CSVs from persisted metrics",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrash",
        description="Federated Rashomon set construction and multiplicity analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = list(STAGES) + ["run-all"]
    for name in commands:
        p = sub.add_parser(name, help=_STAGE_HELP.get(name, "run every stage in order"))
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--output", help="artifact directory (default: config/output env)")
        p.add_argument("--workers", type=int, default=1, help="worker pool size")
        p.add_argument("--force", action="store_true", help="ignore cached stage results")
        p.add_argument("--seed", type=int, help="override the config master seed")
        if name == "run-all":
            p.add_argument("--stage", choices=STAGES, help="run a single stage only")
    return parser


def resolve_output(explicit: str | None, config_output: str | None, config_path: str) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get("FEDRASH_OUTPUT")
    if config_output:
        path = Path(config_output)
        if not path.is_absolute() and root:
            path = Path(root) / path
        return path
    base = Path(root) if root else Path("fedrash-runs")
    return base / Path(config_path).stem


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed, raw={**cfg.raw, "master_seed": args.seed})

    output = resolve_output(args.output, cfg.output_dir, args.config)
    runner = Runner(cfg, output, workers=args.workers, force=args.force)
    if args.command == "run-all":
        stages = [args.stage] if getattr(args, "stage", None) else None
    else:
        stages = [args.command]
    try:
        runner.run(stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"artifacts: {output}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
