"""Command line entry point: ``scagroup <stage> [options]``.

Exit codes: 0 on success, 1 for a bad config or input file, 2 when a
stage fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .pipeline import ConfigError, PipelineConfig, run_pipeline, run_stage
from .reports import InputFileError
from .sca import MODES

log = logging.getLogger("scagroup")

STAGES = ("run", "generate", "affinity", "embed", "group", "train", "oracle", "report")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags below override it")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory (default: results)")
    common.add_argument("--data", help="dataset directory to use instead of generating one")
    common.add_argument("--eta", type=float, help="lookahead step size for the one-step optima")
    common.add_argument("--n-samples", type=int, help="samples used for the affinity estimate")
    common.add_argument("--sca-mode", choices=MODES, help="how task optima are compared")
    common.add_argument("--budget", type=int, help="maximum number of groups")
    common.add_argument("--runs", type=int, help="independent grouping runs")
    common.add_argument("--mode", choices=("mtl", "reptile"), help="group training procedure")
    common.add_argument("--epochs", type=int, help="training epochs (mtl) or meta-iterations (reptile)")
    common.add_argument("--oracle", action="store_true", help="also run the exhaustive oracle (run only)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scagroup", description="Task grouping from sample-wise convergence affinities.")
    sub = parser.add_subparsers(dest="stage", required=True)
    helps = {
        "run": "every stage in order, then the report",
        "generate": "write a planted-group synthetic dataset",
        "affinity": "estimate the raw and normalised affinity matrices",
        "embed": "train the graph attention network for one run",
        "group": "best-of-runs GMM grouping on the embeddings",
        "train": "train and evaluate the selected grouping and a random baseline",
        "oracle": "score every partition into at most --budget groups (at most 8 tasks)",
        "report": "summary.json, plot_data.tsv and figures from existing outputs",
    }
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.data is not None:
        cfg.data_dir = args.data
    if args.eta is not None:
        cfg.sca.eta = args.eta
    if args.n_samples is not None:
        cfg.sca.n_samples = args.n_samples
    if args.sca_mode is not None:
        cfg.sca.mode = args.sca_mode
    if args.budget is not None:
        cfg.grouping.budget = args.budget
    if args.runs is not None:
        cfg.grouping.runs = args.runs
    if args.mode is not None:
        cfg.train = replace(cfg.train, mode=args.mode)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.oracle:
        cfg.baselines.oracle = True
    try:
        cfg.train.__post_init__()
    except ValueError as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, InputFileError) as exc:
        print(f"scagroup: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.stage == "run":
            summary = run_pipeline(cfg)
            print(json.dumps({"out": cfg.out, "config_hash": summary["config_hash"], "status": summary.get("status")}, sort_keys=True))
        else:
            run_stage(cfg, args.stage)
            print(f"{args.stage}: wrote outputs to {cfg.out}")
    except (ConfigError, InputFileError, FileNotFoundError) as exc:
        print(f"scagroup: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure of a stage
        log.debug("stage failed", exc_info=True)
        print(f"scagroup: {args.stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
