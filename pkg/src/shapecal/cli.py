"""Command line entry point: ``shapecal <stage> --config run.json``.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import STAGES, ConfigError, Pipeline, PipelineConfig, StageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapecal", description="Shape-based Bayesian calibration pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline"):
        p = sub.add_parser(name, help="run all stages" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, default=1, help="processes for forward evaluations")
        p.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
        p.add_argument("--seed-override", type=int, metavar="K", help="use K for every seed in the config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({})
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        if args.out:
            cfg = cfg.with_output(args.out)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        pipe = Pipeline(cfg, workers=args.workers, force=args.force)
        if args.command == "pipeline":
            pipe.run_all()
        else:
            pipe.run(args.command)
    except (StageError, OSError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
