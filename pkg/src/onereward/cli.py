"""Command line: ``onereward <command> [--config PATH] [--seed N] [--out DIR] [--workers N]``.

On success a one-line JSON status goes to stdout; on failure a JSON error
record goes to stderr and the exit code is nonzero (2 for configuration
problems, 3 for missing or malformed inputs, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import pipeline
from .checkpoint import CheckpointError
from .config import ExperimentConfig, load_config
from .numcore import ConfigurationError
from .prefdata import DatasetError

EXIT_CONFIG = 2
EXIT_INPUT = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="process fan-out for candidate generation")

    parser = argparse.ArgumentParser(prog="onereward", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-base", parents=[common], help="flow-matching pre-training of the base generator")
    sub.add_parser("gen-data", parents=[common], help="candidate sets and preference pairs")
    sub.add_parser("train-rm", parents=[common], help="pairwise reward model and scalar baseline")
    rl = sub.add_parser("train-rl", parents=[common], help="reward-feedback fine-tuning")
    rl.add_argument("--dynamic", action="store_true", help="EMA-updated reference instead of a fixed one")
    g = sub.add_parser("gsb", parents=[common], help="oracle good/same/bad of two generator checkpoints")
    g.add_argument("--a", help="checkpoint judged (default: RL policy)")
    g.add_argument("--b", help="checkpoint compared against (default: base)")
    sub.add_parser("report", parents=[common], help="consolidate every stage report in the run directory")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all gradients")
    gc.add_argument("--points", type=int, default=10)
    gc.add_argument("--coords", type=int, default=30)
    sub.add_parser("all", parents=[common], help="every stage in order, then the report")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def dispatch(args, cfg: ExperimentConfig) -> dict:
    run = pipeline.Run(cfg, cfg.out, pipeline.check_workers(args.workers))
    cmd = args.command
    if cmd == "train-base":
        return pipeline.train_base(run)
    if cmd == "gen-data":
        return pipeline.gen_data(run)
    if cmd == "train-rm":
        return pipeline.train_rm(run)
    if cmd == "train-rl":
        return pipeline.train_rl(run, dynamic=args.dynamic or None)
    if cmd == "gsb":
        return pipeline.gsb(run, args.a, args.b)
    if cmd == "report":
        return pipeline.report(run.out)
    if cmd == "gradcheck":
        return pipeline.gradcheck(run, args.points, args.coords)
    if cmd == "all":
        return pipeline.run_all(run)
    raise ConfigurationError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        dispatch(args, cfg)
    except ConfigurationError as e:
        return _fail(args.command, e, EXIT_CONFIG)
    except (pipeline.StageError, CheckpointError, DatasetError, FileNotFoundError) as e:
        return _fail(args.command, e, EXIT_INPUT)
    except Exception as e:  # noqa: BLE001 - every failure must leave a record
        return _fail(args.command, e, 1)
    print(json.dumps({"status": "ok", "command": args.command, "out": cfg.out}))
    return 0


def _fail(command: str, err: Exception, code: int) -> int:
    record = {"status": "error", "command": command, "error": type(err).__name__, "message": str(err),
              "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
