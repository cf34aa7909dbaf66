#!/usr/bin/env python3
"""
Command-line runner for the spectrum trading experiments.

    python run_experiment.py --config configs/fs_sweep.json --sweep fs --out results
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from harness.experiment import run_experiment
from harness.records import modes_for, run_and_store
from harness.report import FORMATS, emit_report
from models.schemas import RunConfig
from trading.errors import SpectrumTradingError

# Configure logging
logging.basicConfig(
    level=os.getenv("SPECTRUM_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def parse_args(argv: Optional[list[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Spectrum trading between virtual optical networks")
    parser.add_argument("--config", help="RunConfig JSON document (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="Master seed, overrides the config")
    parser.add_argument("--sweep", choices=["fs", "mu"], default="fs",
                        help="Sweep FS per virtual link or the forbidden threshold")
    parser.add_argument("--out", default="results", help="Output directory for the report files")
    parser.add_argument("--format", default=",".join(FORMATS), help="Comma-separated subset of csv,json")
    parser.add_argument("--mode", choices=["st", "nonst", "both"], default="both")
    parser.add_argument("--trace", help="Directory for per-simulation message traces (JSON lines)")
    parser.add_argument("--persist", action="store_true", help="Store the run in SPECTRUM_DB_URL")
    return parser.parse_args(argv)


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    data = {}
    if path:
        data = RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8")).model_dump()
    if seed is not None:
        data["seed"] = seed
    return RunConfig.model_validate(data)


def main(argv: Optional[list[str]] = None) -> int:
    args = parse_args(argv)
    try:
        config = load_config(args.config, args.seed)
        formats = [item.strip() for item in args.format.split(",") if item.strip()]
        modes = modes_for(args.mode)
        logger.info(f"Configuration: sweep={args.sweep} mode={args.mode} seed={config.seed} "
                    f"von_count={config.von_count} replications={config.replications}")
        if args.persist:
            import database

            db_run = database.create_run(config, args.sweep, args.mode)
            report = run_and_store(db_run.id, config, sweep=args.sweep, modes=modes, trace_dir=args.trace)
        else:
            report = run_experiment(config, sweep=args.sweep, modes=modes, trace_dir=args.trace)
        emit_report(report, args.out, formats)
    except (SpectrumTradingError, ValidationError, OSError, ValueError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return 1

    for point in report.points:
        if not point.feasible:
            logger.warning(f"⚠️  fs={point.fs_per_vlink} mu={point.threshold_mu:g}: infeasible")
        elif point.mean_improvement_pct is not None:
            logger.info(f"fs={point.fs_per_vlink} mu={point.threshold_mu:g}: "
                        f"mean improvement {point.mean_improvement_pct:.2f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
