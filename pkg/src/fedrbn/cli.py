"""Command-line front end for running experiments."""

from __future__ import annotations

import argparse
import sys

from .errors import ArgumentError
from .harness import ExperimentConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedrbn",
        description="Federated robustness propagation experiments on "
                    "synthetic multi-domain data.")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--mode", choices=["fedavg", "fedbn", "fedrbn"],
                   help="baseline/aggregation preset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel local-training workers")
    p.add_argument("--rounds", type=int, help="override federation rounds")
    p.add_argument("--no-dbn", action="store_true")
    p.add_argument("--no-detector", action="store_true")
    p.add_argument("--no-copy", action="store_true")
    p.add_argument("--no-debias", action="store_true")
    p.add_argument("--no-reweight", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_yaml(args.config)
    else:
        cfg = ExperimentConfig()
    if args.mode:
        cfg.apply_mode(args.mode)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if args.rounds is not None:
        cfg.federation.rounds = args.rounds
    fed = cfg.federation
    if args.no_dbn:
        fed.use_dbn = False
    if args.no_detector:
        fed.use_detector = False
    if args.no_copy:
        fed.use_copy = False
    if args.no_debias:
        fed.use_debias = False
    if args.no_reweight:
        fed.use_reweight = False
    return cfg.sync_flags()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        summary = run_experiment(cfg)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"SA {summary['SA']:.4f}  RA {summary['RA']:.4f}  "
          f"(ST: SA {summary['SA_ST']:.4f} RA {summary['RA_ST']:.4f})")
    print(f"outputs written to {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
