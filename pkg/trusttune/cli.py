"""Command-line entry point: ``python cli.py <subcommand> [--config ...] [--out ...]``"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from . import runner
from .config import RunConfig, load_config, parse_seed_list
from .errors import ConfigError, TrustTuneError
from .utils import setup_logger

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Callable[[RunConfig], Any]] = {
    "pretrain": runner.cmd_pretrain,
    "finetune": runner.cmd_finetune,
    "stability": runner.cmd_stability,
    "chain": runner.cmd_chain,
    "cycle": runner.cmd_cycle,
    "probe-matrix": runner.cmd_probe_matrix,
    "theory": runner.cmd_theory,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trusttune",
        description="Regularized fine-tuning and representational-collapse probing on a tiny encoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "report"]:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=str, default=None, help="YAML config file")
        cmd.add_argument("--out", type=str, default=None, help="output directory (run.out_dir)")
        cmd.add_argument("--seeds", type=str, default=None, help="comma separated seeds (run.seeds)")
        cmd.add_argument("--jobs", type=int, default=None, help="parallel seed workers (run.jobs)")
        if name == "report":
            cmd.add_argument("run_dirs", nargs="+", help="finetune run directories or parents of them")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {}
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    if args.seeds is not None:
        overrides["run.seeds"] = parse_seed_list(args.seeds)
    if args.jobs is not None:
        overrides["run.jobs"] = args.jobs
    return load_config(args.config, args.command, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        log_file = Path(config.get("run.out_dir")) / config.get("logging.file")
        setup_logger(str(log_file), config.get("logging.level"), config.get("logging.rotate_mb"))
        logger.info("%s started (config %s)", args.command, config.config_hash)
        if args.command == "report":
            runner.cmd_report(config, [Path(p) for p in args.run_dirs])
        else:
            COMMANDS[args.command](config)
        logger.info("%s finished", args.command)
        return 0
    except TrustTuneError as e:
        return _report_failure(args.command, e)
    except (ValueError, FileNotFoundError) as e:
        # bad inputs that surface below the config layer
        return _report_failure(args.command, ConfigError(str(e)))


def _report_failure(command: str, error: TrustTuneError) -> int:
    logger.error(f"Error in {command}: {error}")
    print(f"error: {error}", file=sys.stderr)
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
