"""Command-line driver for the experiment pipeline.

Verbs mirror the pipeline stages: corpus, cluster, train-classifier,
train-zoo, evaluate, report.  On failure a machine-readable error record is
printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import STAGES, ExperimentConfig, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abrkit",
        description="Condition-aware ABR experiment pipeline",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    parser.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage")
    sub.add_parser("pipeline", help="run every stage in order")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        config = ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        if args.command == "pipeline":
            for stage in STAGES:
                run_stage(stage, config, args.out)
        else:
            run_stage(args.command, config, args.out)
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit nonzero
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
