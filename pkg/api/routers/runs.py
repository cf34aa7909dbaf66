import json
import logging
from typing import List, Literal, Optional

from fastapi import APIRouter, BackgroundTasks, HTTPException, Query, status

import database
from harness.records import modes_for, run_and_store
from models.schemas import (
    BlockHeader,
    RunConfig,
    RunCreate,
    RunDetailed,
    RunSummary,
    SimulationRow,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1", tags=["runs"])


def get_run_or_404(run_id: int) -> database.DBRun:
    db_run = database.get_run(run_id)
    if db_run is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return db_run


def execute_run(run_id: int, payload: RunCreate):
    """Background task: simulate and store; failures are recorded on the run."""
    try:
        run_and_store(run_id, payload.config, sweep=payload.sweep, modes=modes_for(payload.mode))
    except Exception as e:
        logger.error(f"Run {run_id} failed: {e}")


# === RUN ENDPOINTS ===
@router.get("/runs", response_model=List[RunSummary])
def list_runs(
    skip: int = Query(0, ge=0),
    limit: int = Query(100, ge=1, le=500),
    run_status: Optional[str] = Query(None, alias="status", description="pending, running, finished or failed"),
):
    """List stored runs, newest first"""
    return database.list_runs(skip=skip, limit=limit, status=run_status)


@router.get("/runs/{run_id}", response_model=RunDetailed)
def get_run(run_id: int):
    """Run with configuration echo, per-point statistics and chain summaries"""
    db_run = get_run_or_404(run_id)
    detail = RunDetailed.model_validate(db_run)
    detail.config = RunConfig.model_validate(json.loads(db_run.config_json))
    report = database.run_report(db_run)
    if report is not None:
        detail.points = report.points
        detail.chains = report.chains
    return detail


@router.get("/runs/{run_id}/rows", response_model=List[SimulationRow])
def get_run_rows(
    run_id: int,
    mode: Optional[Literal["st", "nonst"]] = Query(None, description="Only rows of this mode"),
):
    get_run_or_404(run_id)
    return database.get_run_rows(run_id, mode=mode)


@router.get("/runs/{run_id}/blocks", response_model=List[BlockHeader])
def get_run_blocks(run_id: int):
    """Committed block headers of every ST simulation in the run"""
    get_run_or_404(run_id)
    return database.get_run_blocks(run_id)


@router.post("/runs", response_model=RunSummary, status_code=status.HTTP_202_ACCEPTED)
def create_run(payload: RunCreate, background_tasks: BackgroundTasks):
    """Queue an experiment; poll GET /runs/{id} for its status"""
    db_run = database.create_run(payload.config, payload.sweep, payload.mode)
    background_tasks.add_task(execute_run, db_run.id, payload)
    logger.info(f"Run {db_run.id} queued ({payload.sweep} sweep, mode {payload.mode})")
    return db_run
