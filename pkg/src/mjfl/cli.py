"""Command-line entry point: ``mjfl run | compare | pretrain | tournament``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import engine, experiment, rlds
from .config import SCHEDULERS, load_config
from .errors import MjflError

LOG_ENV = "MJFL_LOG"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mjfl", description="Multi-job federated learning scheduling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one configuration")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--scheduler", choices=SCHEDULERS)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path, help="output directory (default: config 'output')")

    cmp_ = sub.add_parser("compare", help="tabulate time to target across runs")
    cmp_.add_argument("--inputs", required=True, nargs="+", type=Path)
    cmp_.add_argument("--out", type=Path, help="also write the table as CSV")

    pre = sub.add_parser("pretrain", help="pre-train an RLDS policy and save a checkpoint")
    pre.add_argument("--config", required=True, type=Path)
    pre.add_argument("--out", required=True, type=Path)
    pre.add_argument("--seed", type=int)

    tour = sub.add_parser("tournament", help="run several schedulers over several seeds")
    tour.add_argument("--config", required=True, type=Path)
    tour.add_argument("--schedulers", nargs="+", default=["random", "greedy", "bods", "rlds"],
                      choices=SCHEDULERS)
    tour.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at the config seed")
    tour.add_argument("--out", required=True, type=Path)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config).with_overrides(args.scheduler, args.seed,
                                                             None if args.out is None else str(args.out))
            experiment.run_experiment(config)
        elif args.command == "compare":
            table = experiment.compare(args.inputs)
            print(experiment.format_comparison(table))
            if args.out:
                experiment.write_comparison(table, args.out)
        elif args.command == "pretrain":
            config = load_config(args.config).with_overrides(scheduler="rlds", seed=args.seed)
            result = engine.pretrain_policy(config)
            args.out.parent.mkdir(parents=True, exist_ok=True)
            rlds.save_checkpoint(result.params, args.out)
        elif args.command == "tournament":
            config = load_config(args.config)
            seeds = range(config.seed, config.seed + args.seeds)
            table = experiment.tournament(config, args.schedulers, seeds, args.out)
            print(experiment.format_comparison(table))
    except (MjflError, ValueError, OSError) as exc:
        print(f"mjfl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
