"""CSV and JSON report files."""
import logging
from pathlib import Path
from typing import Iterable, Union

import pandas as pd

from models.schemas import RunReport, SimulationRow

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json")


def rows_frame(report: RunReport) -> pd.DataFrame:
    columns = list(SimulationRow.model_fields)
    return pd.DataFrame([row.model_dump() for row in report.rows], columns=columns)


def emit_report(report: RunReport, out_dir: Union[str, Path], formats: Iterable[str] = FORMATS) -> list[Path]:
    """Write ``report_<sweep>.csv`` (one row per simulation) and/or ``report_<sweep>.json``.

    Raises:
        ValueError: for an unknown format.
        OSError: if the directory cannot be written.
    """
    formats = list(formats)
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report format(s): {', '.join(sorted(unknown))}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    if "csv" in formats:
        path = out_dir / f"report_{report.sweep}.csv"
        rows_frame(report).to_csv(path, index=False)
        written.append(path)
    if "json" in formats:
        path = out_dir / f"report_{report.sweep}.json"
        path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        written.append(path)
    for path in written:
        logger.info("📄 report written to %s", path)
    return written


def load_rows_csv(path: Union[str, Path]) -> list[SimulationRow]:
    # u64 seeds and hex tips stay strings
    frame = pd.read_csv(path, float_precision="round_trip", dtype={"seed": str, "chain_tip": str})
    frame = frame.astype(object).where(pd.notna(frame), None)
    return [SimulationRow.model_validate(record) for record in frame.to_dict(orient="records")]


def load_report_json(path: Union[str, Path]) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
