import argparse
import logging
import os
import sys
from typing import List, Optional

# Add the project root directory to the Python path
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, project_root)

from backend.lab.config import apply_overrides, load_config
from backend.lab.error_handler import EXIT_USAGE, ConfigurationError, ErrorHandler
from backend.lab.stages import STAGE_ORDER, run_stages

logger = logging.getLogger(__name__)

SUBCOMMANDS = STAGE_ORDER + ("pipeline",)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homog-lab",
                                     description="Periodic homogenization experiments on lattice diffusions")
    parser.add_argument("command", choices=SUBCOMMANDS, help="Stage to run, or 'pipeline' for several")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="Master seed, overrides HOMOG_LAB_SEED and the config")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads; results do not depend on it")
    parser.add_argument("--out", default=None, help="Run directory")
    parser.add_argument("--stages", default=None,
                        help="Comma-separated stage subset for 'pipeline' (default: every stage)")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    try:
        config = apply_overrides(load_config(args.config), seed=args.seed, workers=args.workers, out=args.out)
    except ConfigurationError as e:
        ErrorHandler.handle(e)
        return e.exit_code

    if args.command == "pipeline":
        requested = [s.strip() for s in args.stages.split(",") if s.strip()] if args.stages else None
    else:
        if args.stages:
            logger.warning("--stages is only used by the 'pipeline' command")
        requested = [args.command]
    return run_stages(config, requested)


if __name__ == "__main__":
    sys.exit(main())
