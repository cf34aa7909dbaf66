"""Run an experiment and keep its trading record in the database."""
import logging
from pathlib import Path
from typing import Iterable, Optional, Union

import database
from harness.experiment import run_experiment
from models.schemas import Mode, RunConfig, RunReport, Sweep

logger = logging.getLogger(__name__)


def modes_for(mode: str) -> list[Mode]:
    return ["st", "nonst"] if mode == "both" else [mode]


def run_and_store(
    run_id: int,
    config: RunConfig,
    *,
    sweep: Sweep = "fs",
    modes: Iterable[Mode] = ("st", "nonst"),
    trace_dir: Optional[Union[str, Path]] = None,
) -> RunReport:
    database.set_run_status(run_id, "running")
    try:
        report = run_experiment(
            config,
            sweep=sweep,
            modes=modes,
            trace_dir=trace_dir,
            on_chain=lambda summary, chain: database.save_block_headers(run_id, summary, chain),
        )
    except Exception as exc:
        logger.error("❌ run %d failed: %s", run_id, exc)
        database.set_run_status(run_id, "failed", str(exc))
        raise
    database.save_report(run_id, report)
    return report
