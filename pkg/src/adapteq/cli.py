"""``adapteq <experiment> --config <file> --out <dir>`` command-line entry point.

Exit status: 0 on success, 2 if an acceptance-tagged check failed, 1 on error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import EXPERIMENTS, ExperimentConfig, load_config, run_experiment

log = logging.getLogger("adapteq")


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapteq", description="Adaptive nonlinear equalizer experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="flat key = value config file (dotted keys)")
    p.add_argument("--out", required=True, help="output directory for CSV files and report.json")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, overrides the config")
    p.add_argument("--mode", choices=("reference", "quantized"), help="datapath mode, overrides the config")
    p.add_argument("--taylor-order", type=int, help="Taylor order for the Kerr backward pass (0 = exact)")
    p.add_argument("--workers", type=int, help="process-pool size for sweep points")
    p.add_argument("-q", "--quiet", action="store_true", help="only print failures")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {"experiment": args.experiment}
        if args.seeds is not None:
            overrides["seeds"] = args.seeds
        if args.mode is not None:
            overrides["training.mode"] = args.mode
        if args.taylor_order is not None:
            overrides["training.taylor_order"] = args.taylor_order
        if args.workers is not None:
            overrides["workers"] = args.workers
        cfg = cfg.with_overrides(**overrides)
        log.info("running %s (config %s)", cfg.experiment, cfg.config_hash[:12])
        result = run_experiment(cfg)
        for path in result.write(args.out):
            log.info("wrote %s", path)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 1
        print(f"adapteq: error: {exc}", file=sys.stderr)
        return 1
    for c in result.checks:
        if not (args.quiet and c.passed):
            print(c.line())
    return 2 if result.acceptance_failed else 0


if __name__ == "__main__":
    sys.exit(main())
