"""
Command line entry point.

    sargraph partition --config job.cfg
    sargraph train --config job.cfg [--rank R --rankfile F] [--transport tcp]
    sargraph bench --config job.cfg
"""
from typing import List, Optional
import argparse
import logging

from ..core.errors import InputError, SarGraphError
from .commands import cmd_bench, cmd_partition, cmd_train
from .config import load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

COMMANDS = {
    "partition": lambda config, args: cmd_partition(config),
    "train": lambda config, args: cmd_train(config, progress=not args.no_progress),
    "bench": lambda config, args: cmd_bench(config, progress=not args.no_progress),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sargraph", description="Distributed full-batch GNN training",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS), help="what to run")
    parser.add_argument("--config", required=True, help="key=value job file")
    parser.add_argument("--rank", type=int, default=None, help="this worker's rank (tcp)")
    parser.add_argument("--rankfile", default=None, help="file listing 'rank host:port' per line (tcp)")
    parser.add_argument("--transport", choices=["loopback", "tcp"], default=None,
                        help="override the config's transport")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--no-progress", action="store_true", help="hide the epoch progress bar")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    overrides = {"rank": args.rank, "rankfile": args.rankfile, "transport": args.transport}
    try:
        config = load_config(args.config, overrides)
        COMMANDS[args.command](config, args)
    except InputError as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT
    except SarGraphError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return EXIT_OK
